"""Visual side: tiny conv backbone with a two-level feature pyramid,
class-agnostic region proposals, bilinear RoI pooling, attentional pooling
over region tokens, and the crop-then-encode embedding path."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class RegionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# boxes


def validate_boxes(boxes: torch.Tensor) -> torch.Tensor:
    if boxes.ndim != 2 or boxes.shape[-1] != 4:
        raise RegionError(f"boxes must be (N,4) xyxy, got {tuple(boxes.shape)}")
    if boxes.numel() and not bool((boxes[:, 2] > boxes[:, 0]).all() and (boxes[:, 3] > boxes[:, 1]).all()):
        raise RegionError("degenerate box: need x2 > x1 and y2 > y1")
    return boxes


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]).clamp_min(0) * (boxes[:, 3] - boxes[:, 1]).clamp_min(0)


def iou_xyxy(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between (Na,4) and (Nb,4) xyxy boxes."""
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp_min(0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def clip_boxes(boxes: torch.Tensor, h: float, w: float) -> torch.Tensor:
    out = boxes.clone()
    out[:, 0::2] = out[:, 0::2].clamp(0, w)
    out[:, 1::2] = out[:, 1::2].clamp(0, h)
    return out


def encode_deltas(anchors: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return torch.stack([(gx - ax) / aw, (gy - ay) / ah,
                        torch.log(gw / aw), torch.log(gh / ah)], dim=1)


_MAX_DLOG = math.log(1000.0 / 16)


def decode_deltas(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * torch.exp(deltas[:, 2].clamp(max=_MAX_DLOG))
    h = ah * torch.exp(deltas[:, 3].clamp(max=_MAX_DLOG))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_thr: float) -> torch.Tensor:
    """Greedy NMS; ties broken by original index, so the result is deterministic."""
    order = torch.argsort(scores, descending=True, stable=True)
    keep: List[int] = []
    suppressed = torch.zeros(len(order), dtype=torch.bool)
    ious = iou_xyxy(boxes, boxes)
    for pos, i in enumerate(order.tolist()):
        if suppressed[pos]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        suppressed[pos + 1:] |= ious[i, rest] > iou_thr
    return torch.tensor(keep, dtype=torch.long)


# ---------------------------------------------------------------------------
# backbone


@dataclass
class FeaturePyramid:
    f8: torch.Tensor   # B x C8 x H/8 x W/8
    f16: torch.Tensor  # B x C16 x H/16 x W/16
    strides: Tuple[int, int] = (8, 16)


class TinyBackbone(nn.Module):
    """Three-stage stem sized for 64px crops on a single CPU core."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.width = width
        self.conv1 = nn.Conv2d(3, width, kernel_size=5, stride=4, padding=2)
        self.conv2 = nn.Conv2d(width, 2 * width, kernel_size=3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(2 * width, 4 * width, kernel_size=3, stride=2, padding=1)

    @property
    def c8(self) -> int:
        return 2 * self.width

    @property
    def c16(self) -> int:
        return 4 * self.width

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        x = F.relu(self.conv1(images))
        f8 = F.relu(self.conv2(x))
        f16 = F.relu(self.conv3(f8))
        return FeaturePyramid(f8=f8, f16=f16)


# ---------------------------------------------------------------------------
# region proposal network (single level, class-agnostic)


@dataclass
class RPNConfig:
    anchor_sizes: Tuple[float, ...] = (12.0, 20.0, 32.0, 48.0)
    stride: int = 16
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    nms_iou: float = 0.5
    pre_nms_top: int = 64
    post_nms_top: int = 20
    min_size: float = 4.0
    reg_weight: float = 1.0


def make_anchors(fh: int, fw: int, cfg: RPNConfig) -> torch.Tensor:
    """(fh*fw*A, 4) anchors centered on feature cells, row-major, sizes fastest."""
    ys = (torch.arange(fh, dtype=torch.float32) + 0.5) * cfg.stride
    xs = (torch.arange(fw, dtype=torch.float32) + 0.5) * cfg.stride
    out = []
    for y in ys:
        for x in xs:
            for s in cfg.anchor_sizes:
                out.append([x - s / 2, y - s / 2, x + s / 2, y + s / 2])
    return torch.tensor(out, dtype=torch.float32)


class RPNHead(nn.Module):
    def __init__(self, in_ch: int, n_anchors: int, hidden: int = 64):
        super().__init__()
        self.trunk = nn.Conv2d(in_ch, hidden, kernel_size=3, padding=1)
        self.obj = nn.Conv2d(hidden, n_anchors, kernel_size=1)
        self.reg = nn.Conv2d(hidden, 4 * n_anchors, kernel_size=1)
        self.n_anchors = n_anchors

    def forward(self, f16: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns per-image (HWA,) objectness logits and (HWA,4) deltas,
        flattened in the same order as make_anchors."""
        h = F.relu(self.trunk(f16))
        obj = self.obj(h)                       # B x A x H x W
        reg = self.reg(h)                       # B x 4A x H x W
        b, a, fh, fw = obj.shape
        obj = obj.permute(0, 2, 3, 1).reshape(b, fh * fw * a)
        reg = reg.reshape(b, a, 4, fh, fw).permute(0, 3, 4, 1, 2).reshape(b, fh * fw * a, 4)
        return obj, reg


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Elementwise Huber: 0.5 x^2/beta below beta, |x| - 0.5 beta above."""
    diff = (pred - target).abs()
    return torch.where(diff < beta, 0.5 * diff * diff / beta, diff - 0.5 * beta)


def assign_anchors(anchors: torch.Tensor, gt: torch.Tensor, cfg: RPNConfig
                   ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Returns (labels, matched_gt_index): labels in {1 pos, 0 neg, -1 ignore}."""
    n = anchors.shape[0]
    labels = torch.full((n,), -1, dtype=torch.long)
    matched = torch.zeros(n, dtype=torch.long)
    if gt.numel() == 0:
        labels[:] = 0
        return labels, matched
    ious = iou_xyxy(anchors, gt)
    best, best_gt = ious.max(dim=1)
    labels[best < cfg.neg_iou] = 0
    labels[best >= cfg.pos_iou] = 1
    # every gt keeps its single best anchor even below the threshold
    gt_best = ious.argmax(dim=0)
    labels[gt_best] = 1
    matched = best_gt
    matched[gt_best] = torch.arange(gt.shape[0])
    return labels, matched


def rpn_loss(obj_logits: torch.Tensor, reg_deltas: torch.Tensor,
             anchors: torch.Tensor, gt: torch.Tensor, cfg: RPNConfig) -> torch.Tensor:
    """BCE objectness over pos+neg anchors plus SmoothL1 regression over positives."""
    labels, matched = assign_anchors(anchors, gt, cfg)
    used = labels >= 0
    tgt = (labels == 1).to(obj_logits.dtype)
    obj = F.binary_cross_entropy_with_logits(obj_logits[used], tgt[used])
    pos = labels == 1
    if gt.numel() and bool(pos.any()):
        t = encode_deltas(anchors[pos], gt[matched[pos]])
        reg = smooth_l1(reg_deltas[pos], t).mean()
    else:
        reg = obj_logits.sum() * 0.0
    return obj + cfg.reg_weight * reg


@dataclass
class Proposal:
    box: torch.Tensor   # (4,) xyxy in image coordinates
    score: float


def propose_regions(obj_logits: torch.Tensor, reg_deltas: torch.Tensor,
                    anchors: torch.Tensor, image_hw: Tuple[int, int],
                    cfg: RPNConfig) -> List[Proposal]:
    """Decode, clip, drop tiny boxes, then NMS down to post_nms_top proposals."""
    scores = torch.sigmoid(obj_logits)
    order = torch.argsort(scores, descending=True, stable=True)[:cfg.pre_nms_top]
    boxes = decode_deltas(anchors[order], reg_deltas[order])
    boxes = clip_boxes(boxes, image_hw[0], image_hw[1])
    wh_ok = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_size) & ((boxes[:, 3] - boxes[:, 1]) >= cfg.min_size)
    boxes, kept_scores = boxes[wh_ok], scores[order][wh_ok]
    if boxes.shape[0] == 0:
        return []
    keep = nms(boxes, kept_scores, cfg.nms_iou)[:cfg.post_nms_top]
    return [Proposal(box=boxes[i].detach(), score=float(kept_scores[i])) for i in keep.tolist()]


# ---------------------------------------------------------------------------
# RoI align (own bilinear sampler: pixel centers at integer coordinates,
# zero padding outside the map, samples averaged per bin)


def _bilinear(feat: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample feat (C,H,W) at continuous (ys, xs); returns (C, *ys.shape)."""
    c, h, w = feat.shape
    y0 = torch.floor(ys)
    x0 = torch.floor(xs)
    wy1 = ys - y0
    wx1 = xs - x0
    out = None
    for dy, wy in ((0, 1 - wy1), (1, wy1)):
        for dx, wx in ((0, 1 - wx1), (1, wx1)):
            yi = (y0 + dy).long()
            xi = (x0 + dx).long()
            valid = ((yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)).to(feat.dtype)
            v = feat[:, yi.clamp(0, h - 1), xi.clamp(0, w - 1)] * (wy * wx * valid)
            out = v if out is None else out + v
    return out


def roi_align(feat: torch.Tensor, boxes: torch.Tensor, out_size: int,
              spatial_scale: float, sampling_ratio: int = 2) -> torch.Tensor:
    """(C,H,W) + (N,4) image-space xyxy boxes -> (N,C,out,out).

    Each output bin averages sampling_ratio^2 bilinear samples placed at
    regular fractional offsets inside the bin.
    """
    validate_boxes(boxes)
    n = boxes.shape[0]
    fb = boxes * spatial_scale
    s = sampling_ratio
    # sample center offsets within one bin, in bin-width units
    off = (torch.arange(s, dtype=feat.dtype) + 0.5) / s
    outs = []
    for i in range(n):
        x1, y1, x2, y2 = fb[i]
        bw = (x2 - x1) / out_size
        bh = (y2 - y1) / out_size
        gx = x1 + (torch.arange(out_size, dtype=feat.dtype)[:, None] + off[None, :]) * bw  # out x s
        gy = y1 + (torch.arange(out_size, dtype=feat.dtype)[:, None] + off[None, :]) * bh
        ys = gy.reshape(-1)[:, None].expand(-1, out_size * s)        # (out*s, out*s)
        xs = gx.reshape(-1)[None, :].expand(out_size * s, -1)
        vals = _bilinear(feat, ys, xs)                               # C x out*s x out*s
        vals = vals.reshape(feat.shape[0], out_size, s, out_size, s).mean(dim=(2, 4))
        outs.append(vals)
    return torch.stack(outs) if outs else feat.new_zeros((0, feat.shape[0], out_size, out_size))


# ---------------------------------------------------------------------------
# attentional pooling over region tokens


@dataclass
class AttnPoolConfig:
    in_ch: int = 32
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 128
    roi_size: int = 14
    d_out: int = 64
    pos_mode: str = "learned"  # or "none"


class AttnPool(nn.Module):
    """14x14 region map -> stride-2 conv -> 7x7 tokens -> transformer with a
    learnable query token whose output is the region embedding."""

    def __init__(self, cfg: AttnPoolConfig):
        super().__init__()
        if cfg.pos_mode not in ("learned", "none"):
            raise RegionError(f"unknown pos_mode {cfg.pos_mode!r}")
        self.cfg = cfg
        self.reduce = nn.Conv2d(cfg.in_ch, cfg.d_model, kernel_size=2, stride=2)
        self.n_tokens = (cfg.roi_size // 2) ** 2
        self.query = nn.Parameter(torch.zeros(cfg.d_model))
        self.pos = nn.Parameter(torch.zeros(self.n_tokens + 1, cfg.d_model))
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.d_model, nhead=cfg.n_heads, dim_feedforward=cfg.ffn_dim,
            dropout=0.0, activation="gelu", batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers=cfg.n_layers)
        self.proj = nn.Linear(cfg.d_model, cfg.d_out)

    def init_params(self, generator: Optional[torch.Generator] = None):
        with torch.no_grad():
            self.query.normal_(0.0, 0.02, generator=generator)
            self.pos.normal_(0.0, 0.02, generator=generator)

    def forward(self, rois: torch.Tensor) -> torch.Tensor:
        """(N, in_ch, roi, roi) -> (N, d_out) L2-normalized."""
        n = rois.shape[0]
        tok = self.reduce(rois)                                   # N x d x 7 x 7
        tok = tok.flatten(2).transpose(1, 2)                      # N x 49 x d
        q = self.query[None, None, :].expand(n, 1, -1)
        seq = torch.cat([q, tok], dim=1)                          # N x 50 x d
        if self.cfg.pos_mode == "learned":
            seq = seq + self.pos[None, :, :]
        out = self.encoder(seq)[:, 0]
        out = self.proj(out)
        return out / out.norm(dim=-1, keepdim=True).clamp_min(1e-12)


# ---------------------------------------------------------------------------
# crop-then-encode visual path (teacher)


def _masked_mean(x: torch.Tensor, m: torch.Tensor, dims) -> torch.Tensor:
    return (x * m).sum(dims) / m.sum(dims).clamp_min(1.0)


def _surface_mask(crops: torch.Tensor) -> torch.Tensor:
    """(B,3,S,S) -> (B,S,S) float mask of the crop's own surface pixels.

    Two cascaded predicates. Backgrounds are near-gray while any painted
    surface keeps channel spread even through its darkest texture cells, so
    chroma separates surface from background. Fragments of *neighboring*
    regions are chromatic too, but texture cells scale a surface's color
    multiplicatively and light/dark variants shift it along gray, so in
    chroma space (rgb minus its per-pixel mean) every pixel of one surface
    points along its base-hue direction; keeping only pixels aligned with
    the crop center's dominant chroma direction drops intruders of any
    other hue. A 3x3 erosion then drops silhouette-boundary pixels."""
    chroma_w = crops.max(dim=1).values - crops.min(dim=1).values
    fg = (chroma_w > 0.045).float()
    cvec = crops - crops.mean(dim=1, keepdim=True)
    q = crops.shape[-1] // 4
    dom = _masked_mean(cvec[:, :, q:-q, q:-q], fg[:, None, q:-q, q:-q], (2, 3))
    dom = dom / dom.norm(dim=1, keepdim=True).clamp_min(1e-6)
    cos = (cvec * dom[:, :, None, None]).sum(dim=1)
    cos = cos / cvec.norm(dim=1).clamp_min(1e-6)
    fg = fg * (cos > 0.5).float()
    fg = -F.max_pool2d(-fg[:, None], 3, stride=1, padding=1)
    return fg[:, 0]


def _texture_stats(luma: torch.Tensor, fg: torch.Tensor,
                   norm: torch.Tensor) -> torch.Tensor:
    """Orientation-energy statistics of a (B,S,S) luma map: mean |d/dx|,
    |d/dy| and both diagonal derivatives over pixel pairs lying entirely on
    the surface mask, normalized by mean surface brightness so the texture
    signature is independent of the surface color."""
    def g(a, b, ma, mb):
        return _masked_mean((a - b).abs(), ma * mb, (1, 2))

    dx = g(luma[:, :, 1:], luma[:, :, :-1], fg[:, :, 1:], fg[:, :, :-1])
    dy = g(luma[:, 1:, :], luma[:, :-1, :], fg[:, 1:, :], fg[:, :-1, :])
    d1 = g(luma[:, 1:, 1:], luma[:, :-1, :-1], fg[:, 1:, 1:], fg[:, :-1, :-1])
    d2 = g(luma[:, 1:, :-1], luma[:, :-1, 1:], fg[:, 1:, :-1], fg[:, :-1, 1:])
    return torch.stack([dx, dy, d1, d2], dim=1) / norm[:, None]


class VisualEncoder(nn.Module):
    """Backbone trunk + fixed-form readout head over pooled conv features,
    color moments, and orientation-energy statistics; output is an
    L2-normalized embedding.

    The head is a frozen block-diagonal random projection: each feature
    block (conv summary / color moments / texture statistics / silhouette
    grid) maps into its own slice of the output, each slice is normalized
    separately, then weighted by a fixed energy share. Cosine similarity
    in this space is a share-weighted sum of per-block cosines, so e.g. a
    heavily textured surface cannot shrink the color component of its own
    embedding, which a single whole-vector normalization would do.
    `calibrate` folds per-feature standardization (measured on unlabeled
    crops) into the head."""

    # color statistics over the surface's *bright* cells (texture cells scale
    # color multiplicatively, so bright-cell moments are pattern-invariant):
    # rgb and its squares, unit chroma direction, bright luma and its square;
    # contrast/skew/texture-at-two-scales/dark-cell-fraction and their
    # squares (several textures differ only in where they sit along one
    # statistic's axis, and a linear readout needs the quadratic terms to
    # express a band-pass "middle interval" discriminant); and a 4x4
    # silhouette-occupancy grid that encodes region shape
    N_FIXED = (3 + 3 + 3 + 1 + 1) + 2 * (1 + 1 + 4 + 4 + 1) + 16

    def __init__(self, backbone: TinyBackbone, d_out: int = 64, pool: int = 4):
        super().__init__()
        self.backbone = backbone
        self.pool = pool
        n_conv = backbone.c8 + backbone.c8 * pool * pool
        in_dim = n_conv + self.N_FIXED
        self.head = nn.Linear(in_dim, d_out)
        # per block: input span, output slice, energy share. conv gets a
        # small share: hundreds of random dimensions whose cosine-space noise
        # would otherwise drown the designed statistics
        dc = max(1, 3 * d_out // 16)
        dt = max(1, 11 * d_out // 32)
        o1, o2, o3 = dc, 2 * dc, 2 * dc + dt
        if o3 >= d_out:
            raise ValueError("d_out too small for block slicing")
        self._blocks = ((0, n_conv, 0, o1, 0.10),
                        (n_conv, n_conv + 11, o1, o2, 0.35),
                        (n_conv + 11, n_conv + 33, o2, o3, 0.30),
                        (n_conv + 33, in_dim, o3, d_out, 0.25))
        with torch.no_grad():
            mask = torch.zeros_like(self.head.weight)
            for i0, i1, o0, o1, _ in self._blocks:
                mask[o0:o1, i0:i1] = 1.0
            self.head.weight.mul_(mask)

    def features(self, crops: torch.Tensor) -> torch.Tensor:
        """(B,3,S,S) crops -> (B, in_dim) pre-projection feature rows.

        The color/texture statistics come from surface pixels inside the
        central half-window of the crop: the window drops background corners
        and fragments of neighboring regions at the crop edges, the surface
        mask drops whatever background the window still admits. Without the
        mask a slanted silhouette reads as diagonal texture and background
        corners fake a dark texture cell. Crops where (almost) no surface
        survives — background-only proposals — fall back to whole-window
        statistics."""
        pyr = self.backbone(crops)
        gap = pyr.f8.mean(dim=(2, 3))
        grid = F.adaptive_avg_pool2d(pyr.f8, self.pool).flatten(1)
        fg_full = _surface_mask(crops)
        occ = F.adaptive_avg_pool2d(fg_full[:, None], 4).flatten(1)
        q = crops.shape[-1] // 4
        fg = fg_full[:, q:-q, q:-q]
        ok = fg.sum(dim=(1, 2)) >= 16.0
        fg = torch.where(ok[:, None, None], fg, torch.ones_like(fg))
        mid = crops[:, :, q:-q, q:-q]
        luma = mid.mean(dim=1)
        mu = _masked_mean(luma, fg, (1, 2))
        var = _masked_mean((luma - mu[:, None, None]) ** 2, fg, (1, 2))
        sd = var.sqrt().clamp_min(1e-4)
        contrast = sd[:, None]
        z = (luma - mu[:, None, None]) / sd[:, None, None]
        skew = _masked_mean(z ** 3, fg, (1, 2))[:, None]
        norm = mu.clamp_min(0.05)
        tex = _texture_stats(luma, fg, norm)
        luma_h = F.avg_pool2d(luma[:, None], 2)[:, 0]
        fg_h = (F.avg_pool2d(fg[:, None], 2)[:, 0] > 0.99).float()
        tex_half = _texture_stats(luma_h, fg_h, norm)
        # bright cells = surface pixels at or above mean luma, i.e. the ones a
        # dark texture cell never claims; dark-cell mass complements them
        bright = fg * (luma > mu[:, None, None]).float()
        bm = _masked_mean(luma, bright, (1, 2)).clamp_min(0.05)
        dark = fg * (luma < 0.6 * bm[:, None, None]).float()
        dark_frac = (dark.sum(dim=(1, 2)) / fg.sum(dim=(1, 2)).clamp_min(1.0))[:, None]
        rgbb = _masked_mean(mid, bright[:, None], (2, 3))
        cvec = rgbb - rgbb.mean(dim=1, keepdim=True)
        hue = cvec / cvec.norm(dim=1, keepdim=True).clamp_min(1e-6)
        color = torch.cat([rgbb, rgbb * rgbb, hue, bm[:, None], (bm * bm)[:, None]], dim=1)
        lin = torch.cat([contrast, skew, tex, tex_half, dark_frac], dim=1)
        return torch.cat([gap, grid, color, lin, lin * lin, occ], dim=1)

    @torch.no_grad()
    def calibrate(self, feature_rows: torch.Tensor) -> None:
        """Fold standardization by the given unlabeled feature sample into the
        head: head(x) becomes W diag(1/sd) (x - mu), whitening each feature.
        The per-slice normalization in forward() handles block balancing."""
        mu = feature_rows.mean(dim=0)
        sd = feature_rows.std(dim=0, unbiased=False).clamp_min(1e-3)
        self.head.weight.mul_(sd.reciprocal()[None, :])
        self.head.bias.sub_(self.head.weight @ mu)

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        """(B,3,S,S) crops -> (B, d_out) unit-norm embeddings."""
        h = self.head(self.features(crops))
        parts = []
        for _, _, o0, o1, share in self._blocks:
            v = h[:, o0:o1]
            v = v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            parts.append(math.sqrt(share) * v)
        out = torch.cat(parts, dim=1)
        return out / out.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def crop_region(image: torch.Tensor, box: torch.Tensor, crop_size: int = 64) -> torch.Tensor:
    """Cut box from (3,H,W), resize short side to crop_size keeping aspect,
    center-crop to crop_size x crop_size."""
    _, h, w = image.shape
    x1 = int(max(0, math.floor(float(box[0]))))
    y1 = int(max(0, math.floor(float(box[1]))))
    x2 = int(min(w, math.ceil(float(box[2]))))
    y2 = int(min(h, math.ceil(float(box[3]))))
    x2 = max(x2, x1 + 2)
    y2 = max(y2, y1 + 2)
    x1 = min(x1, w - 2)
    y1 = min(y1, h - 2)
    patch = image[:, y1:y2, x1:x2]
    ph, pw = patch.shape[1], patch.shape[2]
    scale = crop_size / min(ph, pw)
    nh = max(crop_size, int(round(ph * scale)))
    nw = max(crop_size, int(round(pw * scale)))
    # nearest keeps silhouette edges hard: bilinear would smear them into
    # blend ramps that read as texture gradients downstream
    patch = F.interpolate(patch[None], size=(nh, nw), mode="nearest")[0]
    top = (nh - crop_size) // 2
    left = (nw - crop_size) // 2
    return patch[:, top:top + crop_size, left:left + crop_size]


def crop_and_encode(image: torch.Tensor, boxes: torch.Tensor, encoder: VisualEncoder,
                    crop_size: int = 64) -> torch.Tensor:
    """Encode each box of one image through the crop pipeline; (N, d_out)."""
    if boxes.shape[0] == 0:
        return torch.zeros((0, encoder.head.out_features))
    crops = torch.stack([crop_region(image, b, crop_size) for b in boxes])
    return encoder(crops)
