"""The two-stage joint super-resolution / denoising network.

Stage one is a residual super-resolution network at the low resolution:
a head conv, CFM-conditioned residual blocks, a channel-expanding conv and
a pixel shuffle to 2x, with a 1x1 head producing the intermediate output.
Stage two is a recurrent auto-encoder denoiser at the high resolution:
conv+maxpool encoder levels with convolutional recurrent merges, and a
decoder of nearest-upsample + CFM residual blocks, the last few of which
use deformable convolution.  Guide features from the gBuffer modulate both
stages via CFM; a cross-stage skip adds the pre-upsample features into the
decoder level of matching size.

Everything is explicit forward/backward; the sequence methods thread the
recurrent state and run full backpropagation through time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .params import ParamStore
from .rng import NS_INIT, RngStream, stream_id
from .layers.blocks import CFM, Conv, RecurrentMerge, ResBlock
from .layers.resample import (maxpool2x2, maxpool2x2_backward, nearest_resize,
                              nearest_resize_backward, nearest_upsample2x,
                              nearest_upsample2x_backward, pixel_shuffle,
                              pixel_shuffle_backward)


@dataclass(frozen=True)
class ModelConfig:
    sr_blocks: int = 4
    width: int = 32
    upscale: int = 2
    encoder_levels: int = 5
    deformable_decoder_blocks: tuple[int, ...] = (3, 4, 5)
    gbuffer_channels: int = 7
    guide_channels: int = 16
    use_channel_aug: bool = True
    use_skip: bool = True
    use_cfm: bool = True
    stage_order: str = "sr_first"     # "sr_first" | "denoise_first"

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.upscale != 2:
            raise ValueError("only 2x upscaling is supported")
        bad = [b for b in self.deformable_decoder_blocks
               if not 1 <= b <= self.encoder_levels]
        if bad:
            raise ValueError(
                f"deformable decoder blocks {bad} outside 1..{self.encoder_levels}")
        if self.stage_order not in ("sr_first", "denoise_first"):
            raise ValueError(f"unknown stage order {self.stage_order!r}")

    @staticmethod
    def with_deform_count(count: int, **kwargs) -> "ModelConfig":
        """Config whose last `count` decoder blocks are deformable."""
        levels = kwargs.pop("encoder_levels", 5)
        blocks = tuple(range(levels - count + 1, levels + 1)) if count else ()
        return ModelConfig(encoder_levels=levels,
                           deformable_decoder_blocks=blocks, **kwargs)


@dataclass
class RecurrentState:
    """One hidden feature map per encoder level."""
    hidden: list[np.ndarray] = field(default_factory=list)


class SRDModel:
    """Builds the layer graph for a config and owns forward/backward."""

    def __init__(self, config: ModelConfig):
        self.config = config
        w = config.width
        gch = config.guide_channels
        guide = gch if config.use_cfm else 0
        blk_variant = "cfm" if config.use_cfm else "plain"

        # Shared gBuffer feature encoder (two 3x3 convs + ReLU).
        self.gbuf1 = Conv("gbuf.conv1", config.gbuffer_channels, gch, 3)
        self.gbuf2 = Conv("gbuf.conv2", gch, gch, 3)

        # Super-resolution stage.
        if config.stage_order == "sr_first":
            head_in = 3
        else:
            head_in = (w + 3) if config.use_channel_aug else 3
        self.sr_head = Conv("sr.head", head_in, w, 3)
        self.sr_blocks = [
            ResBlock(f"sr.block{i}", w, blk_variant, guide_channels=guide)
            for i in range(config.sr_blocks)
        ]
        r = config.upscale
        self.sr_upconv = Conv("sr.upconv", w, w * r * r, 3)
        self.sr_out = Conv("sr.out", w, 3, 1)

        # Denoising stage (recurrent auto-encoder).
        if config.stage_order == "sr_first":
            enc_in = (w + 3) if config.use_channel_aug else 3
        else:
            enc_in = 3
        levels = config.encoder_levels
        self.enc_convs = [
            Conv(f"dn.enc{l}", enc_in if l == 1 else w, w, 3)
            for l in range(1, levels + 1)
        ]
        self.merges = [RecurrentMerge(f"dn.merge{l}", w) for l in range(1, levels + 1)]
        self.dec_blocks = []
        for l in range(1, levels + 1):
            if l in config.deformable_decoder_blocks:
                variant = "deform_cfm" if config.use_cfm else "plain"
            else:
                variant = blk_variant
            self.dec_blocks.append(
                ResBlock(f"dn.dec{l}", w, variant, guide_channels=guide))
        self.dn_out = Conv("dn.out", w, 3, 1)

    # -- parameters ------------------------------------------------------

    def _layers(self):
        yield self.gbuf1
        yield self.gbuf2
        yield self.sr_head
        yield from self.sr_blocks
        yield self.sr_upconv
        yield self.sr_out
        yield from self.enc_convs
        yield from self.merges
        yield from self.dec_blocks
        yield self.dn_out

    def init_params(self, seed: int, dtype=tensor.DTYPE) -> ParamStore:
        """Deterministic parameter store; one init stream per layer."""
        store = ParamStore()
        for i, layer in enumerate(self._layers()):
            layer.init_params(store, RngStream(seed, stream_id(NS_INIT, i)), dtype)
        return store

    def param_count(self) -> int:
        return self.init_params(0).total_params()

    # -- gBuffer encoder -------------------------------------------------

    def _gbuf_forward(self, store, g_lr):
        h1, c1 = self.gbuf1.forward(store, g_lr)
        a1 = tensor.relu(h1)
        h2, c2 = self.gbuf2.forward(store, a1)
        g_feat = tensor.relu(h2)
        return g_feat, (c1, h1, c2, h2)

    def _gbuf_backward(self, store, cache, d_gfeat):
        c1, h1, c2, h2 = cache
        dh2 = tensor.relu_backward(h2, d_gfeat)
        da1 = self.gbuf2.backward(store, c2, dh2)
        dh1 = tensor.relu_backward(h1, da1)
        self.gbuf1.backward(store, c1, dh1, need_grad_x=False)

    # -- super-resolution stage ------------------------------------------

    def _sr_forward(self, store, x_in, g_feat):
        h, hc = self.sr_head.forward(store, x_in)
        cur = h
        blk_caches = []
        for blk in self.sr_blocks:
            cur, bc = blk.forward(store, cur, g_feat if blk.cfm else None)
            blk_caches.append(bc)
        features_lr = cur
        up, uc = self.sr_upconv.forward(store, features_lr)
        features_hr = pixel_shuffle(up, self.config.upscale)
        out, oc = self.sr_out.forward(store, features_hr)
        return features_lr, features_hr, out, (hc, blk_caches, uc, oc)

    def _sr_backward(self, store, cache, d_flr, d_fhr, d_out, need_grad_x=False):
        hc, blk_caches, uc, oc = cache
        d_fhr = d_fhr + self.sr_out.backward(store, oc, d_out)
        d_up = pixel_shuffle_backward(d_fhr, self.config.upscale)
        d_cur = self.sr_upconv.backward(store, uc, d_up)
        if d_flr is not None:
            d_cur = d_cur + d_flr
        d_gfeat = None
        for blk, bc in zip(reversed(self.sr_blocks), reversed(blk_caches)):
            d_cur, dg = blk.backward(store, bc, d_cur)
            if dg is not None:
                d_gfeat = dg if d_gfeat is None else d_gfeat + dg
        d_xin = self.sr_head.backward(store, hc, d_cur, need_grad_x=need_grad_x)
        return d_xin, d_gfeat

    # -- denoising stage -------------------------------------------------

    def zeros_state(self, batch: int, in_h: int, in_w: int, dtype=tensor.DTYPE
                    ) -> RecurrentState:
        """All-zeros hidden state for a denoiser input of (in_h, in_w)."""
        levels = self.config.encoder_levels
        if in_h % (1 << levels) or in_w % (1 << levels):
            raise ValueError(
                f"denoiser input ({in_h}, {in_w}) not divisible by 2^{levels}")
        hidden = []
        h, w = in_h, in_w
        for _ in range(levels):
            h, w = h // 2, w // 2
            hidden.append(np.zeros((batch, self.config.width, h, w), dtype=dtype))
        return RecurrentState(hidden)

    def _denoise_forward(self, store, x_in, g_feat, skip_lr, state: RecurrentState):
        cfg = self.config
        levels = cfg.encoder_levels
        in_h, in_w = x_in.shape[2], x_in.shape[3]
        if in_h % (1 << levels) or in_w % (1 << levels):
            raise ValueError(
                f"denoiser input ({in_h}, {in_w}) not divisible by 2^{levels}")

        enc_caches = []
        new_hidden = []
        cur = x_in
        for l in range(levels):
            h, cc = self.enc_convs[l].forward(store, cur)
            a = tensor.relu(h)
            p, arg = maxpool2x2(a)
            m, mc = self.merges[l].forward(store, p, state.hidden[l])
            enc_caches.append((cc, h, arg, mc))
            new_hidden.append(m)
            cur = m

        dec_caches = []
        d = cur
        skip_level = levels - 1  # decoder level whose output matches the LR size
        for l in range(1, levels + 1):
            u = nearest_upsample2x(d)
            skipped = cfg.use_skip and cfg.stage_order == "sr_first" and l == skip_level
            if skipped:
                u = u + skip_lr
            blk = self.dec_blocks[l - 1]
            if blk.cfm is not None:
                g_l = nearest_resize(g_feat, u.shape[2], u.shape[3])
            else:
                g_l = None
            d, bc = blk.forward(store, u, g_l)
            dec_caches.append((bc, skipped))
        out, oc = self.dn_out.forward(store, d)
        return out, d, RecurrentState(new_hidden), (enc_caches, dec_caches, oc,
                                                    g_feat.shape[2:])

    def _denoise_backward(self, store, cache, d_out, d_feats, d_state_next):
        """Returns (d_xin, d_gfeat, d_skip, d_state_prev)."""
        enc_caches, dec_caches, oc, g_size = cache
        levels = self.config.encoder_levels

        d_d = self.dn_out.backward(store, oc, d_out)
        if d_feats is not None:
            d_d = d_d + d_feats
        d_gfeat = None
        d_skip = None
        for l in range(levels, 0, -1):
            bc, skipped = dec_caches[l - 1]
            blk = self.dec_blocks[l - 1]
            d_u, dg = blk.backward(store, bc, d_d)
            if dg is not None:
                dg_lr = nearest_resize_backward(dg, g_size[0], g_size[1])
                d_gfeat = dg_lr if d_gfeat is None else d_gfeat + dg_lr
            if skipped:
                d_skip = d_u
            d_d = nearest_upsample2x_backward(d_u)

        d_state_prev = [None] * levels
        d_cur = d_d
        for l in range(levels, 0, -1):
            cc, h, arg, mc = enc_caches[l - 1]
            d_m = d_cur + d_state_next[l - 1] if d_state_next[l - 1] is not None else d_cur
            d_p, d_hidden = self.merges[l - 1].backward(store, mc, d_m)
            d_state_prev[l - 1] = d_hidden
            d_a = maxpool2x2_backward(d_p, arg)
            d_h = tensor.relu_backward(h, d_a)
            d_cur = self.enc_convs[l - 1].backward(store, cc, d_h,
                                                  need_grad_x=(l > 1 or True))
        return d_cur, d_gfeat, d_skip, d_state_prev

    # -- per-frame composition -------------------------------------------

    def forward_frame(self, store, c_lr, g_lr, state: RecurrentState):
        """One time step.  Returns (intermediate, final, new_state, cache).

        sr_first: intermediate is the 2x output of the SR stage, final the
        denoised 2x output.  denoise_first: intermediate is the denoised
        LR image, final the 2x output of the SR stage.
        """
        cfg = self.config
        if c_lr.shape[1] != 3 or g_lr.shape[1] != cfg.gbuffer_channels:
            raise ValueError(
                f"expected 3 radiance and {cfg.gbuffer_channels} gBuffer channels, "
                f"got {c_lr.shape[1]} and {g_lr.shape[1]}")
        if c_lr.shape[2:] != g_lr.shape[2:]:
            raise ValueError(
                f"radiance {c_lr.shape[2:]} and gBuffer {g_lr.shape[2:]} sizes differ")
        g_feat, gc = self._gbuf_forward(store, g_lr)
        if cfg.stage_order == "sr_first":
            flr, fhr, hr_int, sc = self._sr_forward(store, c_lr, g_feat)
            if cfg.use_channel_aug:
                x_in = np.concatenate([fhr, hr_int], axis=1)
            else:
                x_in = hr_int
            g_hr = nearest_upsample2x(g_feat)
            hr_clean, _, new_state, dc = self._denoise_forward(
                store, x_in, g_hr, flr if cfg.use_skip else None, state)
            return hr_int, hr_clean, new_state, ("sr_first", gc, sc, dc)
        else:
            lr_den, feats, new_state, dc = self._denoise_forward(
                store, c_lr, g_feat, None, state)
            if cfg.use_channel_aug:
                x_in = np.concatenate([feats, lr_den], axis=1)
            else:
                x_in = lr_den
            _, _, hr_out, sc = self._sr_forward(store, x_in, g_feat)
            return lr_den, hr_out, new_state, ("denoise_first", gc, sc, dc)

    def backward_frame(self, store, cache, d_intermediate, d_final, d_state_next):
        """BPTT step for one frame; returns d_state_prev."""
        cfg = self.config
        order, gc, sc, dc = cache
        w = cfg.width
        if order == "sr_first":
            d_xin, d_gfeat_hr, d_skip, d_state_prev = self._denoise_backward(
                store, dc, d_final, None, d_state_next)
            if cfg.use_channel_aug:
                d_fhr = d_xin[:, :w]
                d_int_total = d_intermediate + d_xin[:, w:]
            else:
                d_fhr = np.zeros(
                    (d_xin.shape[0], w, d_xin.shape[2], d_xin.shape[3]),
                    dtype=d_xin.dtype)
                d_int_total = d_intermediate + d_xin
            _, d_gfeat = self._sr_backward(store, sc, d_skip, d_fhr, d_int_total)
            d_gfeat_from_dn = nearest_upsample2x_backward(d_gfeat_hr) \
                if d_gfeat_hr is not None else None
            if d_gfeat_from_dn is not None:
                d_gfeat = d_gfeat_from_dn if d_gfeat is None else d_gfeat + d_gfeat_from_dn
        else:
            zero_fhr = None
            d_xin, d_gfeat_sr = self._sr_backward(
                store, sc, None,
                np.zeros_like_or_none := None, d_final, need_grad_x=True)
            raise NotImplementedError
        if d_gfeat is not None:
            self._gbuf_backward(store, gc, d_gfeat)
        return d_state_prev

    # -- sequences -------------------------------------------------------

    def forward_sequence(self, store, c_lr_seq, g_lr_seq, state=None):
        """Run all frames of (B, T, C, H, W) inputs, threading the state.

        Returns (intermediates, finals, final_state, caches) with the per-
        frame outputs stacked along a leading time axis.
        """
        if c_lr_seq.ndim != 5 or g_lr_seq.ndim != 5:
            raise ValueError("sequence inputs must be (B, T, C, H, W)")
        b, t = c_lr_seq.shape[0], c_lr_seq.shape[1]
        if state is None:
            h, w = c_lr_seq.shape[3], c_lr_seq.shape[4]
            if self.config.stage_order == "sr_first":
                h, w = h * 2, w * 2
            state = self.zeros_state(b, h, w, dtype=c_lr_seq.dtype)
        inters, finals, caches = [], [], []
        for i in range(t):
            inter, final, state, cache = self.forward_frame(
                store, c_lr_seq[:, i], g_lr_seq[:, i], state)
            inters.append(inter)
            finals.append(final)
            caches.append(cache)
        return inters, finals, state, caches

    def backward_sequence(self, store, caches, d_intermediates, d_finals):
        """Full backpropagation through time over a forward_sequence call."""
        t = len(caches)
        if len(d_intermediates) != t or len(d_finals) != t:
            raise ValueError("per-frame gradient lists must match the trace length")
        d_state = [None] * self.config.encoder_levels
        for i in range(t - 1, -1, -1):
            d_state = self.backward_frame(
                store, caches[i], d_intermediates[i], d_finals[i], d_state)
        return d_state
