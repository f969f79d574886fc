from .conv import ConvSpec, conv2d_backward, conv2d_forward, im2col, pad2d, unpad2d_adjoint
from .deform import deform_conv_backward, deform_conv_forward, offset_channels
from .resample import (bilinear_upsample2x, maxpool2x2, maxpool2x2_backward,
                       nearest_resize, nearest_resize_backward,
                       nearest_upsample2x, nearest_upsample2x_backward,
                       pixel_shuffle, pixel_shuffle_backward, pixel_unshuffle,
                       pixel_unshuffle_backward)
from .rf import LayerOp, RFReport, atrous_sr_chain, empirical_support, receptive_field
from .blocks import CFM, Conv, DeformConv, OffsetGenerator, RecurrentMerge, ResBlock

__all__ = [
    "ConvSpec", "conv2d_forward", "conv2d_backward", "im2col", "pad2d",
    "unpad2d_adjoint", "deform_conv_forward", "deform_conv_backward",
    "offset_channels", "pixel_shuffle", "pixel_unshuffle",
    "pixel_shuffle_backward", "pixel_unshuffle_backward", "maxpool2x2",
    "maxpool2x2_backward", "nearest_upsample2x", "nearest_upsample2x_backward",
    "nearest_resize", "nearest_resize_backward", "bilinear_upsample2x",
    "LayerOp", "RFReport", "receptive_field", "atrous_sr_chain",
    "empirical_support", "Conv", "CFM", "OffsetGenerator", "DeformConv",
    "ResBlock", "RecurrentMerge",
]
