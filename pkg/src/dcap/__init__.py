"""Dilated-convolution and attention-aided pooling blocks on a small numpy autodiff core,
assembled into a toy single-band object detector."""

from .blocks import (AaSPBlock, C3Block, ConvBlock, ConvParams, MDRCBlock, SEAttention, SPPFBlock,
                     SSCABlock, aasp_forward, c3_forward, mdrc_forward, se_forward, sppf_forward,
                     ssca_forward)
from .detector import (Detection, DetectorModel, LossBreakdown, ModelConfig, assign_targets,
                       build_model, compute_loss, decode, load_checkpoint, nms, predict,
                       save_checkpoint, train)
from .metrics import BoxXYXY, EvalReport, aggregate_runs, average_precision, evaluate, iou, match_detections
from .tensor import Tensor, gradcheck

__version__ = "0.1.0"
