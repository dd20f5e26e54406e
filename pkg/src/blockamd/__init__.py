"""Hybrid CTC / autoregressive / block attention-mask decoder ASR on a small autodiff core."""

from .ctc import ctc_greedy, ctc_loss, ctc_prefix_extend, prefix_score
from .evaluation import benchmark, lattice_density, mapsswe, oracle_wer, wer
from .kernels import BACKEND_NAME
from .model import ModelConfig, ModelParams, load_checkpoint, save_checkpoint
from .search import (Fixed, FusionWeights, Mixed, beam_search_amd, beam_search_ctc_ar,
                     greedy_ctc_ar, make_schedule, parse_schedule)
from .synthdata import CorpusConfig, generate_corpus, load_corpus, save_corpus
from .training import LossWeights, TrainConfig, tripartite_loss, train

__version__ = "0.1.0"
