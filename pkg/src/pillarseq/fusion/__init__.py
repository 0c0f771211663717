"""Sequence-fusion architectures built on pillars and the tensor engine."""

from .concat import concat_clouds
from .convlstm import ConvLstmCell, ConvLstmNet, ConvLstmState, convlstm_cell, convlstm_net
from .decode import decode_detections, nms
from .fc import CellMlp, fc_forward
from .model import Detector, FusionKind, build_model, detection_loss, encode_targets

__all__ = [
    "concat_clouds", "ConvLstmCell", "ConvLstmNet", "ConvLstmState", "convlstm_cell",
    "convlstm_net", "decode_detections", "nms", "CellMlp", "fc_forward", "Detector",
    "FusionKind", "build_model", "detection_loss", "encode_targets",
]
