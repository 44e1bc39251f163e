"""Multi-channel sequence-to-sequence neural diarization."""

from .core import BlockPlan, DiarizationResult, Segment, emit_rttm, parse_rttm
from .evaluate import DerReport, score_corpus, score_der
from .model import MCS2SND, ModelConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
