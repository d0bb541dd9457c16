"""Species-sound recognition: WAV normalization, MFCC features, per-class
Gaussian HMMs and an averaged-MFCC k-NN classifier."""

from .audio_io import AudioClip, WavSpec, read_wav, write_wav
from .features import FeatureConfig, FeatureMatrix, mfcc
from .hmm import HmmModel, Recognizer, classify, em_train, flat_start, forward_log_likelihood, viterbi
from .preprocess import FormatContract, apply_contract

__all__ = [
    "AudioClip", "WavSpec", "read_wav", "write_wav",
    "FeatureConfig", "FeatureMatrix", "mfcc",
    "HmmModel", "Recognizer", "classify", "em_train", "flat_start", "forward_log_likelihood", "viterbi",
    "FormatContract", "apply_contract",
]
__version__ = "0.1.0"
