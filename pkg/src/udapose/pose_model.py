"""Miniature query-based pose decoder.

A small strided conv stack with sinusoidal positions produces the feature
map. Each of ``n_queries`` instance groups holds one human token and 14
keypoint tokens. A decoder layer runs self-attention inside every group (the
pose prior), single-scale deformable cross-attention into the feature map
(the image cue), fuses the two with a per-token softmax gate (or a plain sum
when the gate is disabled) and refines boxes and keypoints.
"""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import pose_losses
from ._validation import check_image_batch
from .structures import KEYPOINT_NAMES, NUM_KEYPOINTS, PoseInstance

logger = logging.getLogger(__name__)

TOKENS_PER_GROUP = 1 + NUM_KEYPOINTS
ROLES = ("initial", "pose_prior", "image_cue", "concatenated", "fused")
NORM_EPS = 1e-9
_COORD_EPS = 1e-4

# rough layout of the keypoints inside a person box, as (dx, dy) from the
# box centre in units of box width / height
_DEFAULT_TEMPLATE = (
    (0.18, -0.28), (-0.18, -0.28), (0.3, -0.08), (-0.3, -0.08), (0.35, 0.1), (-0.35, 0.1),
    (0.1, 0.05), (-0.1, 0.05), (0.12, 0.27), (-0.12, 0.27), (0.12, 0.46), (-0.12, 0.46),
    (0.0, -0.44), (0.0, -0.32),
)


@dataclass
class PoseModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 3
    n_queries: int = 8
    n_points: int = 4
    stride: int = 8
    ffn_dim: int = 128
    in_channels: int = 3
    backbone_widths: tuple = (32, 64)
    bias: bool = True
    batch_norm: bool = True
    use_dca: bool = True
    keypoint_embed: bool = True

    def __post_init__(self):
        self.backbone_widths = tuple(self.backbone_widths)
        if self.stride not in (1, 2, 4, 8):
            raise ValueError("stride must be one of 1, 2, 4, 8")
        if self.d_model % self.n_heads or self.d_model % 4:
            raise ValueError("d_model must be divisible by n_heads and by 4")
        for name in ("n_layers", "n_queries", "n_points", "ffn_dim", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.backbone_widths) != 2:
            raise ValueError("backbone_widths needs two entries")


@dataclass
class QueryBank:
    tokens: torch.Tensor
    role: str = "initial"
    reference_points: torch.Tensor = None
    gates: torch.Tensor = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown query role {self.role!r}")
        if self.gates is not None:
            s = self.gates.sum(-1)
            if not torch.allclose(s, torch.ones_like(s), atol=1e-6):
                raise ValueError("gate weights must sum to 1 per token")


@dataclass
class FeatureMap:
    grid: torch.Tensor  # (N, D, H_f, W_f)
    stride: int

    def __post_init__(self):
        if not torch.isfinite(self.grid).all():
            raise ValueError("feature map contains non-finite values")


def _tok(x):
    return x.tokens if isinstance(x, QueryBank) else x


def sine_position_encoding(h, w, dim, dtype=torch.float32):
    """(dim, h, w) encoding of normalised cell centres; half the channels for y."""
    ys = (torch.arange(h, dtype=dtype) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype) + 0.5) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.cat([_sine(yy, dim // 2), _sine(xx, dim // 2)], dim=-1).permute(2, 0, 1)


def _sine(coord, dim):
    """Sin/cos features of coordinates in [0, 1]; output (..., dim)."""
    n = dim // 2
    freqs = 2 * math.pi / 10000.0 ** (torch.arange(n, dtype=coord.dtype) / n)
    ang = coord[..., None] * freqs
    return torch.cat([ang.sin(), ang.cos()], dim=-1)


def inverse_sigmoid(x, eps=_COORD_EPS):
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


class Backbone(nn.Module):
    """Three 3x3 convolutions; the first log2(stride) are strided.

    Batch norm (when enabled) follows every convolution; it is affine only
    when ``bias`` is set, so a bias-free model maps zeros to zeros at init.
    """

    def __init__(self, cfg):
        super().__init__()
        n_down = int(round(math.log2(cfg.stride)))
        strides = [2] * n_down + [1] * (3 - n_down)
        widths = (cfg.in_channels, *cfg.backbone_widths, cfg.d_model)
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=strides[i], padding=1, bias=cfg.bias)
            for i in range(3))
        self.norms = nn.ModuleList(
            nn.BatchNorm2d(widths[i + 1], affine=cfg.bias) if cfg.batch_norm else nn.Identity()
            for i in range(3))
        self.stride = cfg.stride
        self.d_model = cfg.d_model

    def forward(self, x):
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = norm(conv(x))
            if i < 2:
                x = F.relu(x)
        pos = sine_position_encoding(x.shape[-2], x.shape[-1], self.d_model, x.dtype)
        return x + pos


class DeformableCrossAttention(nn.Module):
    """Single-scale, single-head deformable sampling around reference points.

    Offsets are predicted in feature-cell units.
    """

    def __init__(self, d_model, n_points, bias=True):
        super().__init__()
        self.n_points = n_points
        self.offsets = nn.Linear(d_model, 2 * n_points)
        self.logits = nn.Linear(d_model, n_points)
        self.value = nn.Linear(d_model, d_model, bias=False)
        self.output = nn.Linear(d_model, d_model, bias=bias)
        nn.init.zeros_(self.offsets.weight)
        ang = torch.arange(n_points, dtype=torch.float32) * (2 * math.pi / n_points)
        with torch.no_grad():
            self.offsets.bias.copy_(torch.stack([ang.cos(), ang.sin()], -1).reshape(-1))
        nn.init.zeros_(self.logits.weight)
        nn.init.zeros_(self.logits.bias)


class DecoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        D = cfg.d_model
        self.instance_attn = nn.MultiheadAttention(D, cfg.n_heads, batch_first=True)
        self.instance_norm = nn.LayerNorm(D)
        self.self_attn = nn.MultiheadAttention(D, cfg.n_heads, batch_first=True)
        self.self_norm = nn.LayerNorm(D)
        self.cross = DeformableCrossAttention(D, cfg.n_points, cfg.bias)
        self.gate = nn.Sequential(nn.Linear(2 * D, D), nn.ReLU(), nn.Linear(D, 2))
        nn.init.zeros_(self.gate[2].weight)
        nn.init.zeros_(self.gate[2].bias)
        self.fuse_norm = nn.LayerNorm(D)
        self.ffn = nn.Sequential(nn.Linear(D, cfg.ffn_dim), nn.ReLU(), nn.Linear(cfg.ffn_dim, D))
        self.ffn_norm = nn.LayerNorm(D)
        self.box_head = _mlp(D, 4)
        self.kp_head = _mlp(D, 2)


def _mlp(d, out):
    m = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, out))
    nn.init.zeros_(m[2].weight)
    nn.init.zeros_(m[2].bias)
    return m


# ----------------------------------------------------------- functional ops

def extract_features(img, model):
    """(N, C, H, W) tensor or (N, H, W, C) array -> :class:`FeatureMap`."""
    x = _as_input(img, model)
    return FeatureMap(model.backbone(x), model.cfg.stride)


def _as_input(img, model):
    stride = model.cfg.stride
    if isinstance(img, torch.Tensor):
        x = img if img.ndim == 4 else img[None]
        h, w = x.shape[-2:]
        if h % stride or w % stride:
            raise ValueError(f"image dims {h}x{w} must be multiples of stride {stride}")
        return x.to(next(model.parameters()).dtype)
    arr = check_image_batch(img, "img", multiple_of=stride)
    return torch.as_tensor(arr.transpose(0, 3, 1, 2).copy(), dtype=next(model.parameters()).dtype)


def pose_prior_self_attn(tokens, attn, norm, pos=None):
    """Self-attention over the tokens of each group: ``norm(t + MHA(t))``.

    ``tokens`` is (..., T, D); leading dims are flattened into independent
    groups. ``pos`` is added to queries and keys only.
    """
    t = _tok(tokens)
    lead, (T, D) = t.shape[:-2], t.shape[-2:]
    flat = t.reshape(-1, T, D)
    qk = flat if pos is None else flat + pos.reshape(-1, T, D)
    out, _ = attn(qk, qk, flat, need_weights=False)
    return norm(flat + out).reshape(*lead, T, D)


def bilinear_sample(grid, points):
    """Sample (N, D, h, w) at normalised (x, y) points (N, P, S, 2) -> (N, P, S, D).

    Cell centres sit at ((j + 0.5) / w, (i + 0.5) / h); outside reads as zero.
    """
    g = points * 2 - 1
    out = F.grid_sample(grid, g, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.permute(0, 2, 3, 1)


def deformable_cross_attn(q_pose, ref, fmap, cross, project=True):
    """Image-cue tokens for (N, P, D) queries with (N, P, 2) reference points.

    Each token samples ``S`` points at ``ref + offset`` and mixes them with
    softmax weights, then applies the value and output projections.
    """
    q = _tok(q_pose)
    grid = fmap.grid if isinstance(fmap, FeatureMap) else fmap
    N, P, _ = q.shape
    h, w = grid.shape[-2:]
    S = cross.n_points
    cell = torch.tensor([1.0 / w, 1.0 / h], dtype=q.dtype)
    off = cross.offsets(q).reshape(N, P, S, 2) * cell
    a = torch.softmax(cross.logits(q), dim=-1)
    samples = bilinear_sample(grid, ref[:, :, None, :] + off)
    agg = (a[..., None] * samples).sum(-2)
    v = cross.value(agg)
    return cross.output(v) if project else v


def dca_gates(q_pose, q_image, gate):
    """Per-token softmax weights (..., 2) ordered (w_pose, w_image)."""
    qp, qi = _tok(q_pose), _tok(q_image)
    if qp.shape != qi.shape:
        raise ValueError(f"dca_fuse: shape mismatch {tuple(qp.shape)} vs {tuple(qi.shape)}")
    return torch.softmax(gate(torch.cat([qp, qi], dim=-1)), dim=-1)


def dca_fuse(q_pose, q_image, gate):
    """Gate-weighted sum of the pose-prior and image-cue tokens.

    Returns ``(Q, weights)``.
    """
    qp, qi = _tok(q_pose), _tok(q_image)
    wts = dca_gates(qp, qi, gate)
    return wts[..., :1] * qp + wts[..., 1:] * qi, wts


def residual_fuse(q_pose, q_image):
    qp, qi = _tok(q_pose), _tok(q_image)
    if qp.shape != qi.shape:
        raise ValueError(f"residual_fuse: shape mismatch {tuple(qp.shape)} vs {tuple(qi.shape)}")
    return qp + qi


def norm_ratio_probe(q_image, q_pose, eps=NORM_EPS):
    """Per-token ``||q_image|| / ||q_pose||``.

    Returns ``(ratio, undefined)``; tokens whose pose-prior norm is <= eps
    are flagged and carry NaN.
    """
    qi = torch.as_tensor(_tok(q_image)).detach()
    qp = torch.as_tensor(_tok(q_pose)).detach()
    num = qi.norm(dim=-1)
    den = qp.norm(dim=-1)
    undefined = den <= eps
    ratio = torch.where(undefined, torch.full_like(num, float("nan")),
                        num / torch.where(undefined, torch.ones_like(den), den))
    return ratio.numpy(), undefined.numpy()


# ------------------------------------------------------------------- model

class PoseTransformer(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or PoseModelConfig()
        self.cfg = cfg
        D, Q = cfg.d_model, cfg.n_queries
        self.backbone = Backbone(cfg)
        self.human_query = nn.Parameter(torch.randn(Q, D) * 0.1)
        self.keypoint_query = nn.Parameter(torch.randn(NUM_KEYPOINTS, D) * 0.1)
        self.anchor_boxes = nn.Parameter(_default_anchors(Q))
        self.template = nn.Parameter(torch.tensor(_DEFAULT_TEMPLATE))
        self.pos_mlp = nn.Sequential(nn.Linear(D, D), nn.ReLU(), nn.Linear(D, D))
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.class_head = nn.Linear(D, 1)
        nn.init.constant_(self.class_head.bias, -2.0)

    def architecture(self):
        return {"kind": "pose_transformer", "config": asdict(self.cfg)}

    @classmethod
    def from_architecture(cls, arch):
        if arch.get("kind") != "pose_transformer":
            raise ValueError(f"not a pose model checkpoint: {arch.get('kind')!r}")
        cfg = dict(arch["config"])
        return cls(PoseModelConfig(**cfg))

    def init_template(self, instances):
        """Set the keypoint layout prior from ground-truth instances."""
        rel, n = np.zeros((NUM_KEYPOINTS, 2)), np.zeros(NUM_KEYPOINTS)
        for inst in instances:
            vis = inst.visibility > 0
            d = (inst.keypoints - inst.box[:2]) / inst.box[2:]
            rel[vis] += d[vis]
            n += vis
        if n.min() > 0:
            with torch.no_grad():
                self.template.copy_(torch.as_tensor(rel / n[:, None], dtype=self.template.dtype))

    def _initial(self, N):
        cfg = self.cfg
        D, Q = cfg.d_model, cfg.n_queries
        human = self.human_query[None, :, None, :].expand(N, Q, 1, D)
        kp = self.keypoint_query if cfg.keypoint_embed else torch.zeros_like(self.keypoint_query)
        kps = (self.human_query[:, None, :] + kp[None])[None].expand(N, Q, NUM_KEYPOINTS, D)
        tokens = torch.cat([human, kps], dim=2)
        box_logit = self.anchor_boxes[None].expand(N, Q, 4)
        rel = self.template[None, None].expand(N, Q, NUM_KEYPOINTS, 2)
        return tokens, box_logit, rel

    def forward(self, x, probe=False):
        """Returns dict with logits (N, Q), boxes (N, Q, 4), keypoints (N, Q, K, 2)
        and, when ``probe``, per-layer tables."""
        cfg = self.cfg
        fmap = self.backbone(x)
        N = x.shape[0]
        Q, T, D = cfg.n_queries, TOKENS_PER_GROUP, cfg.d_model
        tokens, box_logit, rel = self._initial(N)
        layers_probe = []
        for layer in self.layers:
            box = torch.sigmoid(box_logit)
            ref = torch.cat([box[..., None, :2], _place(box, rel)], dim=2)  # (N, Q, T, 2)
            pos = self.pos_mlp(_sine(ref, D // 2).flatten(-2))
            human = tokens[:, :, 0]
            inter, _ = layer.instance_attn(human + pos[:, :, 0], human + pos[:, :, 0], human,
                                           need_weights=False)
            human = layer.instance_norm(human + inter)
            tokens = torch.cat([human[:, :, None], tokens[:, :, 1:]], dim=2)
            q_pose = pose_prior_self_attn(tokens, layer.self_attn, layer.self_norm, pos)
            q_image = deformable_cross_attn((q_pose + pos).reshape(N, Q * T, D),
                                            ref.reshape(N, Q * T, 2), fmap,
                                            layer.cross).reshape(N, Q, T, D)
            if cfg.use_dca:
                fused, gates = dca_fuse(q_pose, q_image, layer.gate)
            else:
                fused, gates = residual_fuse(q_pose, q_image), None
            tokens = layer.fuse_norm(fused)
            tokens = layer.ffn_norm(tokens + layer.ffn(tokens))
            box_logit = box_logit + layer.box_head(tokens[:, :, 0])
            rel = rel + layer.kp_head(tokens[:, :, 1:])
            if probe:
                layers_probe.append({"q_pose": q_pose.detach(), "q_image": q_image.detach(),
                                     "gates": None if gates is None else gates.detach()})
        box = torch.sigmoid(box_logit)
        out = {
            "logits": self.class_head(tokens[:, :, 0]).squeeze(-1),
            "boxes": box,
            "keypoints": _place(box, rel),
        }
        if probe:
            out["probe"] = layers_probe
        return out


def _place(box, rel):
    """Keypoints from box-relative offsets, kept inside the image."""
    return (box[..., None, :2] + rel * box[..., None, 2:]).clamp(0.0, 1.0)


def _default_anchors(n):
    """Anchor boxes on a coarse grid of centres, in logit space."""
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    out = []
    for i in range(n):
        r, c = divmod(i, cols)
        out.append([(c + 0.5) / cols, (r + 0.5) / rows, 0.35, 0.6])
    return inverse_sigmoid(torch.tensor(out))


def predict_heads(outputs, index=0):
    """PoseInstance list (one per query) for one batch element of ``forward``."""
    p = torch.sigmoid(outputs["logits"][index]).detach().double().numpy()
    boxes = outputs["boxes"][index].detach().double().numpy()
    kps = outputs["keypoints"][index].detach().double().numpy()
    return [PoseInstance(float(p[q]), boxes[q], kps[q]) for q in range(len(p))]


def probe_tables(probe):
    """Rows (layer, instance, keypoint, w_pose, w_image, norm_ratio) for batch element 0.

    Only keypoint tokens are reported; gate columns are NaN without DCA.
    """
    rows = []
    for li, layer in enumerate(probe, start=1):
        ratio, undefined = norm_ratio_probe(layer["q_image"][0], layer["q_pose"][0])
        gates = layer["gates"]
        for q in range(ratio.shape[0]):
            for k, name in enumerate(KEYPOINT_NAMES):
                t = k + 1
                wp = wi = float("nan")
                if gates is not None:
                    wp, wi = (float(v) for v in gates[0, q, t])
                rows.append({"layer": li, "instance": q, "keypoint": name,
                             "w_pose": wp, "w_image": wi,
                             "norm_ratio": float(ratio[q, t]), "undefined": bool(undefined[q, t])})
    return rows


def summarize_probe(rows):
    """Mean over instances: one row per (layer, keypoint)."""
    out = []
    layers = sorted({r["layer"] for r in rows})
    for li in layers:
        for name in KEYPOINT_NAMES:
            sel = [r for r in rows if r["layer"] == li and r["keypoint"] == name]
            out.append({"layer": li, "keypoint": name,
                        "w_pose": float(np.mean([r["w_pose"] for r in sel])),
                        "w_image": float(np.mean([r["w_image"] for r in sel])),
                        "norm_ratio": float(np.nanmean([r["norm_ratio"] for r in sel]))
                        if not all(r["undefined"] for r in sel) else float("nan")})
    return out


@torch.no_grad()
def forward(img, model):
    """Predictions for the first image plus probe tables."""
    model.eval()
    out = model(_as_input(img, model), probe=True)
    rows = probe_tables(out["probe"])
    return predict_heads(out), {"rows": rows, "summary": summarize_probe(rows)}


# ----------------------------------------------------------------- training

@dataclass
class PoseTrainConfig:
    epochs: int = 40
    lr: float = 3e-4
    lr_drop_epoch: int = 34
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4
    batch_size: int = 16
    grad_clip: float = 0.1
    hflip: bool = True
    seed: int = 0
    weights: pose_losses.LossWeights = field(default_factory=pose_losses.LossWeights)
    oks: pose_losses.OksConstants = field(default_factory=pose_losses.OksConstants)

    def __post_init__(self):
        if self.epochs < 1 or not 0 < self.lr_drop_epoch <= self.epochs:
            raise ValueError("need 0 < lr_drop_epoch <= epochs")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be > 0 and batch_size >= 1")

    def lr_at(self, epoch):
        return self.lr if epoch <= self.lr_drop_epoch else self.lr * self.lr_drop_factor


# left/right swap under horizontal flip
FLIP_PERM = (1, 0, 3, 2, 5, 4, 7, 6, 9, 8, 11, 10, 12, 13)


def targets_from_samples(samples, dtype=torch.float32):
    """Per-image dicts of boxes (G, 4), keypoints (G, K, 2), visibility (G, K)."""
    out = []
    for smp in samples:
        inst = smp.instances
        out.append({
            "boxes": torch.as_tensor(np.array([i.box for i in inst]).reshape(-1, 4), dtype=dtype),
            "keypoints": torch.as_tensor(
                np.array([i.keypoints for i in inst]).reshape(-1, NUM_KEYPOINTS, 2), dtype=dtype),
            "visibility": torch.as_tensor(
                np.array([i.visibility for i in inst]).reshape(-1, NUM_KEYPOINTS)),
        })
    return out


def _flip(x, target):
    boxes = target["boxes"].clone()
    boxes[:, 0] = 1 - boxes[:, 0]
    perm = list(FLIP_PERM)
    vis = target["visibility"][:, perm]
    kps = target["keypoints"][:, perm].clone()
    kps[..., 0] = torch.where(vis > 0, 1 - kps[..., 0], kps[..., 0])
    return x.flip(-1), {"boxes": boxes, "keypoints": kps, "visibility": vis}


def batch_loss(outputs, targets, w, k):
    """Sum of per-image set losses divided by the number of ground-truth instances."""
    total = 0
    parts = {"L_h": 0.0, "L_c": 0.0, "L_k": 0.0}
    matched = 0
    n_gt = max(1, sum(len(t["boxes"]) for t in targets))
    p = torch.sigmoid(outputs["logits"])
    for b, tgt in enumerate(targets):
        loss, brk, assign = pose_losses.set_loss(
            p[b], outputs["boxes"][b], outputs["keypoints"][b],
            tgt["boxes"], tgt["keypoints"], tgt["visibility"], w, k)
        total = total + loss
        for name in parts:
            parts[name] += brk[name].item()
        matched += len(assign.pairs)
    parts = {name: v / n_gt for name, v in parts.items()}
    return total / n_gt, parts, matched


def train_pose(model, samples, cfg, start_epoch=1, optimizer_state=None, callback=None):
    """Train on annotated samples.

    ``callback(row, model, optimizer)`` fires after each epoch. Returns
    ``(model, history, optimizer)``; history has one row per optimisation
    step with step, epoch, L_total, L_h, L_c, L_k, matched_count.
    """
    if not samples:
        raise ValueError("no training samples")
    dtype = next(model.parameters()).dtype
    X = check_image_batch([s.image for s in samples], "samples", multiple_of=model.cfg.stride)
    X = torch.as_tensor(X.transpose(0, 3, 1, 2).copy(), dtype=dtype)
    targets = targets_from_samples(samples, dtype)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr_at(start_epoch),
                            weight_decay=cfg.weight_decay)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    steps_per_epoch = -(-len(X) // cfg.batch_size)
    history = []
    model.train()
    for epoch in range(start_epoch, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(X))
        flips = rng.random(len(X)) < 0.5 if cfg.hflip else np.zeros(len(X), bool)
        epoch_rows = []
        for s, start in enumerate(range(0, len(X), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xs, ts = [], []
            for i in idx:
                x, t = X[i], targets[i]
                if flips[i]:
                    x, t = _flip(x, t)
                xs.append(x)
                ts.append(t)
            out = model(torch.stack(xs))
            loss, parts, matched = batch_loss(out, ts, cfg.weights, cfg.oks)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            row = {"step": (epoch - 1) * steps_per_epoch + s + 1, "epoch": epoch,
                   "L_total": loss.item(), **parts, "matched_count": matched}
            epoch_rows.append(row)
        history.extend(epoch_rows)
        logger.debug("pose epoch %d: loss %.4f", epoch, np.mean([r["L_total"] for r in epoch_rows]))
        if callback is not None:
            callback(epoch_rows, model, opt)
    model.eval()
    return model, history, opt


@torch.no_grad()
def predict(model, images, batch_size=64):
    """List (per image) of PoseInstance lists."""
    model.eval()
    X = _as_input(images, model)
    preds = []
    for start in range(0, len(X), batch_size):
        out = model(X[start:start + batch_size])
        preds.extend(predict_heads(out, i) for i in range(out["logits"].shape[0]))
    return preds
