"""Estimator wrappers around the two learnable stages.

``LowLightSynthesizer`` fits the toy autoencoder and the injection adapters
and transforms well-lit images into synthetic low-light ones.
``PoseEstimator`` fits the pose decoder on annotated images and predicts
PoseInstance lists.
"""
import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import eval_harness, freq_ops, lcim, pose_model, synthesis
from ._validation import check_image_batch
from .io import load_checkpoint, save_checkpoint
from .pose_losses import LossWeights, OksConstants
from .structures import AnnotatedSample
from .synthesis import substream



# -------------------------------------------------------------- checkpoints

def _optimizer_tensors(opt):
    out = {}
    if opt is None:
        return out, {}
    state = opt.state_dict()
    for pid, entry in state["state"].items():
        for key, value in entry.items():
            out[f"optimizer/{pid}/{key}"] = value.detach().cpu().numpy()
    return out, {"param_groups": state["param_groups"]}


def _optimizer_state(tensors, header):
    groups = header["extra"].get("optimizer")
    if groups is None:
        return None
    state = {}
    for name, arr in tensors.items():
        if not name.startswith("optimizer/"):
            continue
        _, pid, key = name.split("/", 2)
        t = torch.from_numpy(arr.copy())
        if key == "step":
            t = t.reshape(())
        state.setdefault(int(pid), {})[key] = t
    return {"state": state, "param_groups": groups["param_groups"]}


def save_module(path, module, config=None, extra=None, optimizer=None):
    """UDAC checkpoint of a module's state (plus optimizer moments if given)."""
    tensors, trainable = {}, {}
    params = dict(module.named_parameters())
    for name, value in module.state_dict().items():
        tensors[name] = value.detach().cpu().numpy()
        trainable[name] = name in params and params[name].requires_grad
    opt_tensors, opt_meta = _optimizer_tensors(optimizer)
    tensors.update(opt_tensors)
    extra = dict(extra or {})
    if optimizer is not None:
        extra["optimizer"] = opt_meta
    save_checkpoint(path, tensors, trainable, module.architecture(), config, extra)


def load_module(path, factory):
    """Rebuild a module with ``factory(architecture)``; returns
    ``(module, header, optimizer_state)``."""
    tensors, trainable, header = load_checkpoint(path)
    module = factory(header["architecture"])
    ref = module.state_dict()
    state = {}
    for name, value in ref.items():
        if name not in tensors:
            raise ValueError(f"{path}: checkpoint lacks tensor {name!r}")
        state[name] = torch.from_numpy(tensors[name].copy()).to(value.dtype).reshape(value.shape)
    module.load_state_dict(state)
    for name, p in module.named_parameters():
        p.requires_grad_(bool(trainable.get(name, True)))
    return module, header, _optimizer_state(tensors, header)


# ----------------------------------------------------------------- synthesis

class LowLightSynthesizer(BaseEstimator, TransformerMixin):
    """Fit on unlabeled low-light references (and well-lit images for the
    frozen autoencoder); transform well-lit images into synthetic low-light
    images by pairing each with a randomly drawn reference."""

    def __init__(self, strides=(1, 2, 2, 1), ae_epochs=40, ae_lr=1e-3, ae_batch_size=32,
                 epochs=80, lr_initial=1e-3, lr_late=1e-4, lr_drop_epoch=60, batch_size=16,
                 lambda_freq=4e-4, cutoff_radius=freq_ops.DEFAULT_CUTOFF, normalization="ain",
                 injection="full", random_state=0):
        self.strides = strides
        self.ae_epochs = ae_epochs
        self.ae_lr = ae_lr
        self.ae_batch_size = ae_batch_size
        self.epochs = epochs
        self.lr_initial = lr_initial
        self.lr_late = lr_late
        self.lr_drop_epoch = lr_drop_epoch
        self.batch_size = batch_size
        self.lambda_freq = lambda_freq
        self.cutoff_radius = cutoff_radius
        self.normalization = normalization
        self.injection = injection
        self.random_state = random_state

    def train_config(self):
        return lcim.TrainConfig(lambda_freq=self.lambda_freq, epochs=self.epochs,
                                lr_initial=self.lr_initial, lr_late=self.lr_late,
                                lr_drop_epoch=self.lr_drop_epoch, batch_size=self.batch_size,
                                seed=substream(self.random_state, "lcim"),
                                cutoff_radius=self.cutoff_radius, normalization=self.normalization)

    def fit_backbone(self, well_lit):
        """Pre-train and freeze the autoencoder on well-lit images (plus mirror images)."""
        X = check_image_batch(well_lit, "well_lit")
        X = np.concatenate([X, X[:, :, ::-1]])
        bb, self.ae_history_ = lcim.pretrain_backbone(
            X, epochs=self.ae_epochs, lr=self.ae_lr, batch_size=self.ae_batch_size,
            seed=substream(self.random_state, "autoencoder"), strides=tuple(self.strides))
        self.net_ = lcim.SynthesisNet(bb).freeze_backbone()
        return self

    def fit(self, X, y=None, well_lit=None, callback=None):
        """``X``: low-light references. ``well_lit`` is required unless the
        backbone was already fitted."""
        refs = check_image_batch(X, "X")
        if well_lit is not None:
            self.fit_backbone(well_lit)
        elif not hasattr(self, "net_"):
            raise ValueError("well_lit images are needed to pre-train the autoencoder")
        self.train_config()  # validates the schedule before any work
        self.net_, self.history_, self.optimizer_ = lcim.train_lcim(
            refs, self.train_config(), self.net_, callback=callback)
        self.references_ = refs
        return self

    def resume(self, start_epoch, optimizer_state, callback=None):
        check_is_fitted(self, "net_")
        self.net_, hist, self.optimizer_ = lcim.train_lcim(
            self.references_, self.train_config(), self.net_, start_epoch=start_epoch,
            optimizer_state=optimizer_state, callback=callback)
        self.history_ = list(getattr(self, "history_", [])) + hist
        return self

    def _kwargs(self, injection=None):
        return {"injection": self.injection if injection is None else injection,
                "normalization": self.normalization, "cutoff_radius": self.cutoff_radius}

    def transform(self, X, injection=None):
        """Synthetic low-light images, one per input, references drawn per index."""
        check_is_fitted(self, ["net_", "references_"])
        X = check_image_batch(X, "X")
        seed = substream(self.random_state, "transform")
        out = []
        for i, img in enumerate(X):
            j = synthesis.reference_index(seed, i, 0, len(self.references_))
            out.append(synthesis.synthesize_image(img, self.references_[j], self.net_,
                                                  **self._kwargs(injection)))
        return np.stack(out)

    def synthesize(self, samples, references=None, repeats=2, seed=None, injection=None, jobs=1):
        """Annotated synthetic samples: ``repeats`` per well-lit sample."""
        check_is_fitted(self, "net_")
        refs = self.references_ if references is None else references
        seed = self.random_state if seed is None else seed
        return synthesis.synthesize_set(samples, refs, self.net_, repeats, seed, jobs=jobs,
                                        **self._kwargs(injection))

    def save(self, path, extra=None):
        check_is_fitted(self, "net_")
        save_module(path, self.net_, config=self.get_params(), extra=extra,
                    optimizer=getattr(self, "optimizer_", None))

    @classmethod
    def load(cls, path):
        net, header, opt_state = load_module(path, lcim.SynthesisNet.from_architecture)
        params = dict(header["config"])
        params["strides"] = tuple(params.get("strides", (1, 2, 2, 1)))
        if isinstance(params.get("injection"), list):
            params["injection"] = tuple(params["injection"])
        est = cls(**params)
        est.net_ = net.freeze_backbone()
        for p in est.net_.adapters.parameters():
            p.requires_grad_(True)
        est.header_ = header
        est.optimizer_state_ = opt_state
        return est


# ---------------------------------------------------------------------- pose

class PoseEstimator(BaseEstimator):
    """Query-based pose decoder trained with the Hungarian set loss."""

    def __init__(self, d_model=64, n_heads=4, n_layers=3, n_queries=8, n_points=4, stride=4,
                 ffn_dim=128, use_dca=True, batch_norm=True, epochs=40, lr=3e-4,
                 lr_drop_epoch=34, weight_decay=1e-4, batch_size=16, grad_clip=0.1, hflip=True,
                 loss_weights=None, oks_constants=None, random_state=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.n_queries = n_queries
        self.n_points = n_points
        self.stride = stride
        self.ffn_dim = ffn_dim
        self.use_dca = use_dca
        self.batch_norm = batch_norm
        self.epochs = epochs
        self.lr = lr
        self.lr_drop_epoch = lr_drop_epoch
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.hflip = hflip
        self.loss_weights = loss_weights
        self.oks_constants = oks_constants
        self.random_state = random_state

    def model_config(self, in_channels=3):
        return pose_model.PoseModelConfig(
            d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
            n_queries=self.n_queries, n_points=self.n_points, stride=self.stride,
            ffn_dim=self.ffn_dim, in_channels=in_channels, use_dca=self.use_dca,
            batch_norm=self.batch_norm)

    def train_config(self):
        return pose_model.PoseTrainConfig(
            epochs=self.epochs, lr=self.lr, lr_drop_epoch=self.lr_drop_epoch,
            weight_decay=self.weight_decay, batch_size=self.batch_size,
            grad_clip=self.grad_clip, hflip=self.hflip,
            seed=substream(self.random_state, "pose"),
            weights=self.loss_weights or LossWeights(),
            oks=self.oks_constants or OksConstants())

    @staticmethod
    def _samples(X, y):
        if y is None:
            if not all(isinstance(s, AnnotatedSample) for s in X):
                raise TypeError("pass AnnotatedSample objects or images with y")
            return list(X)
        X = check_image_batch(X, "X")
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} annotation lists")
        return [AnnotatedSample(img, list(inst), source_id=str(i)) for i, (img, inst)
                in enumerate(zip(X, y))]

    def fit(self, X, y=None, callback=None):
        """``X``: AnnotatedSample list, or images with ``y`` per-image instance lists."""
        samples = self._samples(X, y)
        if not samples:
            raise ValueError("no training samples")
        tcfg = self.train_config()
        torch.manual_seed(tcfg.seed)
        self.model_ = pose_model.PoseTransformer(self.model_config(samples[0].image.shape[2]))
        self.model_.init_template([i for s in samples for i in s.instances])
        self.model_, self.history_, self.optimizer_ = pose_model.train_pose(
            self.model_, samples, tcfg, callback=callback)
        self.samples_ = samples
        return self

    def resume(self, samples, start_epoch, optimizer_state, callback=None):
        check_is_fitted(self, "model_")
        self.model_, hist, self.optimizer_ = pose_model.train_pose(
            self.model_, samples, self.train_config(), start_epoch=start_epoch,
            optimizer_state=optimizer_state, callback=callback)
        self.history_ = list(getattr(self, "history_", [])) + hist
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        if len(X) and isinstance(X[0], AnnotatedSample):
            X = np.stack([s.image for s in X])
        return pose_model.predict(self.model_, X)

    def evaluate(self, samples, **kwargs):
        return eval_harness.evaluate_samples(self.predict(samples), samples, **kwargs)

    def score(self, X, y=None):
        """AP@.50:.95 on the given annotated images."""
        return self.evaluate(self._samples(X, y)).ap_mean

    def save(self, path, extra=None):
        check_is_fitted(self, "model_")
        params = self.get_params()
        params["loss_weights"] = None if self.loss_weights is None else vars(self.loss_weights)
        params["oks_constants"] = (None if self.oks_constants is None
                                   else {"k": list(self.oks_constants.k),
                                         "squared": self.oks_constants.squared})
        save_module(path, self.model_, config=params, extra=extra,
                    optimizer=getattr(self, "optimizer_", None))

    @classmethod
    def load(cls, path):
        model, header, opt_state = load_module(path, pose_model.PoseTransformer.from_architecture)
        params = dict(header["config"])
        if params.get("loss_weights"):
            params["loss_weights"] = LossWeights(**params["loss_weights"])
        if params.get("oks_constants"):
            oc = params["oks_constants"]
            params["oks_constants"] = OksConstants(k=tuple(oc["k"]), squared=oc["squared"])
        est = cls(**params)
        est.model_ = model.eval()
        est.header_ = header
        est.optimizer_state_ = opt_state
        return est

    def clone_untrained(self, **overrides):
        est = copy.deepcopy(self)
        for attr in ("model_", "history_", "optimizer_", "samples_"):
            if hasattr(est, attr):
                delattr(est, attr)
        return est.set_params(**overrides)
