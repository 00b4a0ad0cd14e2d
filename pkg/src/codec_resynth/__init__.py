"""Neural-codec resynthesis lab.

Reconstruct audio from only the first residual-vector-quantization code with
coarse-to-fine token prediction, one-step regression, or a paired
Schrodinger bridge, and compare them against the layer-1 baseline.
"""

from .corpus import CorpusSpec, Waveform, crop_random, read_wav, synth_utterance, write_wav
from .transform import EmbeddingSequence, FrameConfig, decode_frames, encode_frames
from .rvq import CodeSequence, Codebook, RVQModel, bitrate, dequantize, quantize, train_rvq
from .bridge import NoiseSchedule, ddpm_backward, make_symmetric_schedule, sample_xt, sb_loss, sb_target
from .metrics import code_accuracy, embed_mse, estoi, eval_suite, si_snr
from .resynth import resynthesize
from .config import ConfigError, RunConfig, default_config

__version__ = "0.1.0"
