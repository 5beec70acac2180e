"""Run configuration: an INI document with sections [run], [data], [lcim],
[pose], [loss] and [eval].

Every key has a documented default (see ``SCHEMA``); unknown sections or
keys and out-of-range values are rejected at load time.
"""
import configparser
import io
from dataclasses import dataclass, field

from . import freq_ops
from .lcim import TrainConfig
from .pose_losses import LossWeights, OksConstants
from .pose_model import PoseModelConfig, PoseTrainConfig
from .structures import NUM_KEYPOINTS
from .synthesis import DatasetConfig
from .toydata import SceneConfig


class ConfigError(ValueError):
    pass


def _int_list(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _float_list(text):
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _bool(text):
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text
    return parse


def _int_choice(*options):
    check = _choice(*options)
    return lambda text: check(int(text))


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise ValueError(f"must be > 0, got {v}")
        return v
    return parse


def _nonneg(kind):
    def parse(text):
        v = kind(text)
        if v < 0:
            raise ValueError(f"must be >= 0, got {v}")
        return v
    return parse


def _unit(text):
    v = float(text)
    if not 0 < v < 1:
        raise ValueError(f"must be in (0, 1), got {v}")
    return v


def _injection(text):
    if text in ("full", "z0"):
        return text
    levels = _int_list(text)
    if not levels or any(i not in (1, 2, 3, 4) for i in levels):
        raise ValueError("injection is 'full', 'z0' or a list drawn from 1..4")
    return levels


PINT, PFLOAT = _positive(int), _positive(float)
NNFLOAT = _nonneg(float)

# section -> key -> (default, parser, description)
SCHEMA = {
    "run": {
        "seed": (0, int, "master seed; UDAPOSE_SEED overrides it"),
    },
    "data": {
        "n_well_lit": (150, PINT, "annotated well-lit scenes"),
        "repeats": (2, PINT, "synthetic copies per well-lit scene (R)"),
        "n_references": (100, PINT, "unlabeled low-light reference captures"),
        "n_test": (60, PINT, "held-out annotated low-light test captures"),
        "height": (32, PINT, "image height"),
        "width": (32, PINT, "image width"),
        "min_persons": (1, PINT, "persons per scene, lower bound"),
        "max_persons": (3, PINT, "persons per scene, upper bound (<= 3)"),
        "injection": ("full", _injection, "'full', 'z0' or levels such as '1 2'"),
        "normalization": ("ain", _choice(*freq_ops.NORMALIZATION_METHODS),
                          "reference intensity normalisation"),
        "cutoff_radius": (freq_ops.DEFAULT_CUTOFF, _unit, "high-pass cutoff as a fraction of min(M,N)/2"),
        "bit_depth": (16, _int_choice(8, 16), "PNG bit depth"),
    },
    "lcim": {
        "strides": ((1, 2, 2, 1), _int_list, "encoder block strides of the toy autoencoder"),
        "ae_epochs": (40, PINT, "autoencoder pre-training epochs"),
        "ae_lr": (1e-3, PFLOAT, "autoencoder pre-training learning rate"),
        "ae_batch_size": (32, PINT, "autoencoder batch size"),
        "epochs": (80, PINT, "adapter training epochs"),
        "lr_initial": (1e-3, PFLOAT, "adapter learning rate before the drop"),
        "lr_late": (1e-4, PFLOAT, "adapter learning rate after the drop"),
        "lr_drop_epoch": (60, PINT, "last epoch at the initial rate"),
        "batch_size": (16, PINT, "adapter batch size"),
        "lambda_freq": (4e-4, NNFLOAT, "weight of the frequency loss"),
    },
    "pose": {
        "d_model": (64, PINT, "token width D"),
        "n_heads": (4, PINT, "self-attention heads"),
        "n_layers": (3, PINT, "decoder layers"),
        "n_queries": (8, PINT, "instance groups"),
        "n_points": (4, PINT, "deformable sampling points per token"),
        "stride": (4, _int_choice(1, 2, 4, 8), "feature stride"),
        "ffn_dim": (128, PINT, "feed-forward hidden width"),
        "use_dca": (True, _bool, "gate fusion (false: plain residual sum)"),
        "batch_norm": (True, _bool, "batch norm in the conv feature extractor"),
        "epochs": (40, PINT, "training epochs"),
        "lr": (3e-4, PFLOAT, "AdamW learning rate"),
        "lr_drop_epoch": (34, PINT, "last epoch before the 10x drop"),
        "weight_decay": (1e-4, NNFLOAT, "AdamW weight decay"),
        "batch_size": (16, PINT, "images per step"),
        "grad_clip": (0.1, NNFLOAT, "gradient norm clip (0 disables)"),
        "hflip": (True, _bool, "random horizontal flips"),
    },
    "loss": {
        "mu": (5.0, NNFLOAT, "box L1 weight"),
        "beta": (2.0, NNFLOAT, "box GIoU weight"),
        "lambda_c": (2.0, NNFLOAT, "classification weight"),
        "omega": (10.0, NNFLOAT, "keypoint L1 weight"),
        "theta": (4.0, NNFLOAT, "keypoint OKS weight"),
        "alpha": (0.25, NNFLOAT, "focal alpha"),
        "gamma": (2.0, NNFLOAT, "focal gamma"),
        "alpha_t": (False, _bool, "alpha for positives, 1 - alpha for negatives"),
        "oks_k": ((0.079,), _float_list, "OKS falloff: one value or 14"),
        "oks_squared": (False, _bool, "squared keypoint distance in the OKS term"),
    },
    "eval": {
        "mask_k": ((0, 2, 4, 6, 8, 10, 12, 14), _int_list, "masked keypoints per person"),
        "mask_trials": (5, PINT, "masking trials per k"),
        "sigma_mask": (1.0, PFLOAT, "occluder half-side in pixels"),
        "scale_sizes": ((50, 100, 200), _int_list, "synthetic training-set sizes"),
        "lambda_values": ((0.0, 4e-5, 4e-4, 4e-3), _float_list, "frequency-loss weights to sweep"),
        "heatmap_sigma": (1.0, PFLOAT, "Gaussian std for heatmap KL, pixels"),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: {k: v[0] for k, v in keys.items()}
                                                  for s, keys in SCHEMA.items()})

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self):
        return self.values["run"]["seed"]

    def set(self, section, key, value):
        """Set one key from text or a typed value, validating it."""
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        parser = SCHEMA[section][key][1]
        try:
            self.values[section][key] = parser(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None

    def validate(self):
        d, lc, p, ls = self["data"], self["lcim"], self["pose"], self["loss"]
        if not 1 <= d["min_persons"] <= d["max_persons"] <= 3:
            raise ConfigError("[data] need 1 <= min_persons <= max_persons <= 3")
        if len(lc["strides"]) != 4 or any(s not in (1, 2) for s in lc["strides"]):
            raise ConfigError("[lcim] strides needs four entries from {1, 2}")
        if lc["lr_drop_epoch"] > lc["epochs"]:
            raise ConfigError("[lcim] lr_drop_epoch must be <= epochs")
        if p["lr_drop_epoch"] > p["epochs"]:
            raise ConfigError("[pose] lr_drop_epoch must be <= epochs")
        if p["d_model"] % p["n_heads"] or p["d_model"] % 4:
            raise ConfigError("[pose] d_model must be divisible by n_heads and by 4")
        if len(ls["oks_k"]) not in (1, NUM_KEYPOINTS) or min(ls["oks_k"]) <= 0:
            raise ConfigError(f"[loss] oks_k needs 1 or {NUM_KEYPOINTS} positive values")
        down = 1
        for s in lc["strides"]:
            down *= s
        for dim in (d["height"], d["width"]):
            if dim % down or dim % p["stride"]:
                raise ConfigError("[data] image dims must be multiples of the autoencoder "
                                  "downscale and the pose stride")
        return self

    # ---------------------------------------------------------- builders
    def scene(self):
        d = self["data"]
        return SceneConfig(height=d["height"], width=d["width"], min_persons=d["min_persons"],
                           max_persons=d["max_persons"])

    def dataset(self):
        d = self["data"]
        return DatasetConfig(n_well_lit=d["n_well_lit"], repeats=d["repeats"],
                             n_references=d["n_references"], n_test=d["n_test"], seed=self.seed,
                             scene=self.scene(), injection=d["injection"],
                             normalization=d["normalization"], cutoff_radius=d["cutoff_radius"],
                             bit_depth=d["bit_depth"])

    def lcim_train(self, lambda_freq=None):
        lc = self["lcim"]
        return TrainConfig(lambda_freq=lc["lambda_freq"] if lambda_freq is None else lambda_freq,
                           epochs=lc["epochs"], lr_initial=lc["lr_initial"], lr_late=lc["lr_late"],
                           lr_drop_epoch=lc["lr_drop_epoch"], batch_size=lc["batch_size"],
                           seed=self.seed, cutoff_radius=self["data"]["cutoff_radius"],
                           normalization=self["data"]["normalization"])

    def pose_model(self, **overrides):
        p = self["pose"]
        kw = {k: p[k] for k in ("d_model", "n_heads", "n_layers", "n_queries", "n_points", "stride",
                                "ffn_dim", "use_dca", "batch_norm")}
        kw.update(overrides)
        return PoseModelConfig(**kw)

    def loss_weights(self):
        ls = self["loss"]
        return LossWeights(**{k: ls[k] for k in ("mu", "beta", "lambda_c", "omega", "theta",
                                                 "alpha", "gamma", "alpha_t")})

    def oks(self):
        k = self["loss"]["oks_k"]
        return OksConstants(k=tuple(k) * NUM_KEYPOINTS if len(k) == 1 else tuple(k),
                            squared=self["loss"]["oks_squared"])

    def pose_train(self, seed=None):
        p = self["pose"]
        return PoseTrainConfig(epochs=p["epochs"], lr=p["lr"], lr_drop_epoch=p["lr_drop_epoch"],
                               weight_decay=p["weight_decay"], batch_size=p["batch_size"],
                               grad_clip=p["grad_clip"], hflip=p["hflip"],
                               seed=self.seed if seed is None else seed,
                               weights=self.loss_weights(), oks=self.oks())

    # ---------------------------------------------------------------- text
    def to_ini(self):
        cp = configparser.ConfigParser()
        for section, keys in self.values.items():
            cp[section] = {k: _fmt(v) for k, v in keys.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self):
        return {s: dict(keys) for s, keys in self.values.items()}


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_config(text):
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for section in cp.sections():
        for key, value in cp[section].items():
            cfg.set(section, key, value)
    return cfg.validate()


def load_config(path=None, overrides=(), env=None):
    """Config from ``path`` (defaults when None), then ``section.key=value``
    overrides, then ``UDAPOSE_SEED`` from ``env``."""
    if path is None:
        cfg = RunConfig()
    else:
        with open(path) as fh:
            cfg = parse_config(fh.read())
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        cfg.set(section.strip(), key.strip(), value.strip())
    if env and env.get("UDAPOSE_SEED") not in (None, ""):
        cfg.set("run", "seed", env["UDAPOSE_SEED"])
    return cfg.validate()


def default_ini():
    """Default config with every key documented."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (default, _, doc) in keys.items():
            lines.append(f"# {doc}")
            lines.append(f"{key} = {_fmt(default)}")
        lines.append("")
    return "\n".join(lines)
