"""vxs: one conditional implicit network for many volume blocks.

A lossy volumetric codec that fits N blocks with a single coordinate
network conditioned on quantized frequency-prior tokens (wavelet low/high
components plus the raw block, fused by attention, snapped to a learnable
codebook), then distills the trained model into a half-size student.
Everything runs on numpy; see README.md for the tour.
"""

from .volume import (Volume, BlockSet, load_raw, save_raw, load_with_sidecar, normalize,
                     crop_blocks, synth_volume, volume_from_source_id)
from .wavelet import WaveletBands, BandPair, dwt3, idwt3, split_bands
from .autodiff import Tensor
from .nn import ParamStore, value_and_grad, attention, mse, kl_softmax
from .optim import OptimizerConfig, adamw_step, cosine_lr
from .prior import (PriorConfig, Codebook, PriorTokens, extract_features, fuse, quantize,
                    quantization_loss, reset_dead_codes)
from .inr import ModelSpec, CoordBatch, embed_coords, predict, sample_coords
from .training import (TrainConfig, TeacherState, StudentState, train_teacher, teacher_loss,
                       code_alignment_loss, output_alignment_loss, distill_student,
                       student_spec_for, train_unconditioned, block_psnrs, save_state,
                       load_state)
from .container import serialize, decode, compression_ratio, read_header, dump_header
from .metrics import psnr, ssim, RDPoint, write_rd_csv, read_rd_csv
from .sweep import rd_sweep, timing_report, fit_independent

__version__ = "0.1.0"
