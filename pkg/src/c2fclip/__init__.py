"""Desk-scale coarse-to-fine contrastive image-text pretraining.

Train a dual encoder on downsampled images, upsample the image position
table, finetune briefly at full resolution, and account for the compute with
an analytical FLOP model.
"""
from .contrastive import info_nce, logits
from .cost import forward_flops, schedule_cost, scaling_exponent, token_count
from .data import downsample, generate_pair, make_dataset, tokenize
from .encoders import DualEncoder, EncoderConfig, patchify
from .schedule import Phase, ScheduleConfig, build_schedule, lr_at, run_schedule, transfer_resolution

__version__ = "0.1.0"
