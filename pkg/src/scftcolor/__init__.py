"""Reference-based sketch colorization with attention-driven feature transfer."""

from .attention import SCFT, attention_matrix, context_transfer, fuse
from .data import SampleConfig, SampleSource, build_training_sample
from .discriminator import PatchDiscriminator
from .encoder import Encoder, build_value_map, encode
from .generator import Generator
from .losses import LossWeights, triplet_loss
from .metrics import fid, sc_psnr
from .reference import correspondence_ground_truth, sample_tps, tps_warp
from .sketch import XDoGParams, extract_sketch
from .training import TrainConfig, Trainer, lr_at, run_training

__version__ = "0.1.0"
