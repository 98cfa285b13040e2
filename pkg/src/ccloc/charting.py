"""Channel-charting autoencoder: architecture, losses, training loops, prediction.

The encoder maps a (B, 5L) feature block to a point in (0, 1)^3, which for
labeled training doubles as the normalised 3-D position. The decoder maps a
3-vector back to a (B, 5L) block.

Training alternates three Adam stages per minibatch pair:

1. reconstruction loss ``E`` on an unlabeled batch, over encoder and decoder;
2. encoder regression loss ``E_e`` on a labeled batch, over the encoder;
3. decoder regression loss ``E_d`` on the same labeled batch, over the decoder.

Each stage keeps its own Adam moments. Stage 1 runs at ``recon_lr_scale``
times the base step size: the reconstruction objective sees every unlabeled
batch and would otherwise pull the chart away from the labeled geometry.
"""
import csv
import dataclasses
import hashlib
import json
import math
import warnings

import numpy as np

from . import nn
from .dataset import Scaler, ScalerStateError, apply_scaler


class ContractError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    batch_unlabeled: int = 35
    batch_labeled: int = 15
    epochs: int = 20
    lambda_reg: float = 1e-4
    lr: float = 3e-3
    # step-size multiplier for the reconstruction stage E
    recon_lr_scale: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_unlabeled < 1 or self.batch_labeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.recon_lr_scale > 0:
            raise ValueError("recon_lr_scale must be > 0")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)


# ------------------------------------------------------------ architecture

def build_encoder(n_bs, n_feat):
    """Per-BS conv stacks, concatenated, then dense(64, ReLU) and dense(3, sigmoid)."""
    def branch():
        return [nn.Conv1D(8, 3), nn.ReLU(), nn.MaxPool1D(2),
                nn.Conv1D(16, 3), nn.ReLU(), nn.MaxPool1D(2),
                nn.Conv1D(16, 3), nn.ReLU(), nn.MaxPool1D(2)]

    layers = [nn.Reshape((n_bs, 1, n_feat)), nn.Concat([branch() for _ in range(n_bs)]),
              nn.Dense(64), nn.ReLU(), nn.Dense(3), nn.Sigmoid()]
    return nn.Sequential(layers, input_shape=(n_bs, n_feat), name="enc")


def _decoder_seed_length(n_feat):
    # three x2 upsamples followed by a width-2 conv with padding 1 add one sample
    if (n_feat - 1) % 8:
        raise ContractError(f"decoder needs 5L - 1 divisible by 8, got 5L = {n_feat}")
    return (n_feat - 1) // 8


def build_decoder(n_bs, n_feat):
    """Mirror of the encoder: dense stack, per-BS upsample + conv stacks, per-BS dense output."""
    seed_len = _decoder_seed_length(n_feat)

    # the convolutions share weights along the feature axis, which mixes five
    # parameter kinds; a per-BS dense read-out gives each slot its own output
    def branch():
        return [nn.Upsample1D(2), nn.Conv1D(16, 3, padding=1), nn.ReLU(),
                nn.Upsample1D(2), nn.Conv1D(8, 3, padding=1), nn.ReLU(),
                nn.Upsample1D(2), nn.Conv1D(1, 2, padding=1), nn.Flatten(), nn.Dense(n_feat)]

    layers = [nn.Dense(64), nn.ReLU(), nn.Dense(n_bs * 16 * seed_len), nn.ReLU(),
              nn.Reshape((n_bs, 16, seed_len)), nn.Concat([branch() for _ in range(n_bs)]),
              nn.Reshape((n_bs, n_feat))]
    return nn.Sequential(layers, input_shape=(3,), name="dec")


def fc_weight_names(enc):
    """Names of the encoder's fully-connected weight matrices (the regularised set)."""
    return [layer.name + ".w" for layer in enc.layers if isinstance(layer, nn.Dense)]


@dataclasses.dataclass
class ChartModel:
    encoder: nn.Sequential
    decoder: nn.Sequential
    enc_params: nn.Params
    dec_params: nn.Params
    scaler: Scaler = None
    meta: dict = dataclasses.field(default_factory=dict)

    @property
    def n_params(self):
        return self.enc_params.size + self.dec_params.size

    def architecture(self):
        return {"encoder": self.encoder.spec(), "decoder": self.decoder.spec(),
                "input_shape": list(self.encoder.in_shape)}

    def architecture_hash(self):
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _streams(seed):
    init_enc, init_dec, shuf_u, shuf_l = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(init_enc), np.random.default_rng(init_dec),
            np.random.default_rng(shuf_u), np.random.default_rng(shuf_l))


def init_model(n_bs, n_feat, seed=0, scaler=None):
    enc, dec = build_encoder(n_bs, n_feat), build_decoder(n_bs, n_feat)
    r_enc, r_dec, _, _ = _streams(seed)
    return ChartModel(enc, dec, enc.init_params(r_enc), dec.init_params(r_dec), scaler)


# ------------------------------------------------------------------ losses

def _reg(model, lambda_reg):
    """(lambda/2)||Omega_FC||^2 and its gradient on the encoder buffer."""
    g = model.enc_params.zeros_like()
    val = 0.0
    if lambda_reg:
        for name in fc_weight_names(model.encoder):
            w = model.enc_params[name]
            val += 0.5 * lambda_reg * float(np.sum(w * w))
            g[name] = lambda_reg * w
    return val, g


def loss_unsupervised(model, X, lambda_reg=0.0, with_signature=False):
    """``E = (1/2m) sum ||U - D(C(U))||^2 + (lambda/2)||Omega_FC||^2``.

    Returns ``(E, grad_enc, grad_dec)`` (plus a kink signature on request).
    """
    m = len(X)
    z, c_enc = nn.forward(model.encoder, model.enc_params, X)
    xh, c_dec = nn.forward(model.decoder, model.dec_params, z)
    r = xh - X
    reg, g_enc = _reg(model, lambda_reg)
    loss = 0.5 * float(np.sum(r * r)) / m + reg
    g_dec, gz = nn.backward(model.decoder, model.dec_params, c_dec, r / m)
    g_e, _ = nn.backward(model.encoder, model.enc_params, c_enc, gz)
    g_enc.flat += g_e.flat
    out = (loss, g_enc, g_dec)
    if with_signature:
        out += (nn.kink_signature(model.encoder, c_enc) + nn.kink_signature(model.decoder, c_dec),)
    return out


def _check_labels(y, m):
    if y is None or len(y) != m or np.any(~np.isfinite(y)):
        raise ContractError("supervised loss needs a finite label for every sample in the batch")


def loss_encoder(model, X, y, lambda_reg=0.0, with_signature=False):
    """``E_e = (1/2m) sum ||y - C(U)||^2 + (lambda/2)||Omega_FC||^2``; returns ``(E_e, grad_enc)``."""
    m = len(X)
    _check_labels(y, m)
    z, cache = nn.forward(model.encoder, model.enc_params, X)
    r = z - y
    reg, g = _reg(model, lambda_reg)
    loss = 0.5 * float(np.sum(r * r)) / m + reg
    g_e, _ = nn.backward(model.encoder, model.enc_params, cache, r / m)
    g.flat += g_e.flat
    out = (loss, g)
    if with_signature:
        out += (nn.kink_signature(model.encoder, cache),)
    return out


def loss_decoder(model, X, y, with_signature=False):
    """``E_d = (1/m) sum ||U - D(y)||^2``; returns ``(E_d, grad_dec)``."""
    m = len(X)
    _check_labels(y, m)
    xh, cache = nn.forward(model.decoder, model.dec_params, y)
    r = xh - X
    loss = float(np.sum(r * r)) / m
    g, _ = nn.backward(model.decoder, model.dec_params, cache, 2.0 * r / m)
    out = (loss, g)
    if with_signature:
        out += (nn.kink_signature(model.decoder, cache),)
    return out


# ---------------------------------------------------------------- training

@dataclasses.dataclass
class LossLog:
    rows: list = dataclasses.field(default_factory=list)

    def add(self, epoch, step, stage, value):
        self.rows.append((int(epoch), int(step), stage, float(value)))

    def series(self, stage):
        return np.array([r[3] for r in self.rows if r[2] == stage])

    def write_csv(self, path, header_comment=None):
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["epoch", "step", "stage", "loss"])
            for epoch, step, stage, value in self.rows:
                w.writerow([epoch, step, stage, repr(value)])


class _LabeledStream:
    """Endless sequence of labeled minibatches, reshuffled whenever exhausted."""

    def __init__(self, idx, size, rng):
        self.idx, self.size, self.rng = np.asarray(idx), size, rng
        self.buf = np.empty(0, dtype=int)

    def next(self):
        while len(self.buf) < self.size:
            self.buf = np.concatenate([self.buf, self.idx[self.rng.permutation(len(self.idx))]])
        out, self.buf = self.buf[:self.size], self.buf[self.size:]
        return out


def _adam(params, grads, state, cfg, scale=1.0):
    nn.adam_step(params, grads, state, cfg.lr * scale, cfg.beta1, cfg.beta2, cfg.eps_adam)


def _guard(loss, stage, epoch, step):
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite {stage} loss {loss} at epoch {epoch}, step {step}")


def _prepare(dataset):
    if dataset.scaler is None:
        raise ScalerStateError("dataset must be split and scaled before training")
    Xu, _ = apply_scaler(dataset, dataset.rows("unlabeled", "train"))
    Xl, yl = apply_scaler(dataset, dataset.rows("labeled", "train"))
    return Xu, Xl, yl


def _run(model, Xu, Xl, yl, cfg, supervised, unsupervised, callback=None):
    _, _, rng_u, rng_l = _streams(cfg.seed)
    log = LossLog()
    st_e = (nn.AdamState.zeros(model.enc_params), nn.AdamState.zeros(model.dec_params))
    st_ee = nn.AdamState.zeros(model.enc_params)
    st_ed = nn.AdamState.zeros(model.dec_params)
    labeled = _LabeledStream(np.arange(len(Xl)), cfg.batch_labeled, rng_l) if supervised else None
    step = 0
    for epoch in range(cfg.epochs):
        if unsupervised:
            order = rng_u.permutation(len(Xu))
            batches = [order[i:i + cfg.batch_unlabeled] for i in range(0, len(order), cfg.batch_unlabeled)]
        else:
            batches = [None] * math.ceil(len(Xl) / cfg.batch_labeled)
        for bu in batches:
            if unsupervised:
                loss, g_enc, g_dec = loss_unsupervised(model, Xu[bu], cfg.lambda_reg)
                _guard(loss, "E", epoch, step)
                _adam(model.enc_params, g_enc, st_e[0], cfg, cfg.recon_lr_scale)
                _adam(model.dec_params, g_dec, st_e[1], cfg, cfg.recon_lr_scale)
                log.add(epoch, step, "E", loss)
            if supervised:
                bl = labeled.next()
                loss, g = loss_encoder(model, Xl[bl], yl[bl], cfg.lambda_reg)
                _guard(loss, "E_e", epoch, step)
                _adam(model.enc_params, g, st_ee, cfg)
                log.add(epoch, step, "E_e", loss)
                if unsupervised:
                    loss, g = loss_decoder(model, Xl[bl], yl[bl])
                    _guard(loss, "E_d", epoch, step)
                    _adam(model.dec_params, g, st_ed, cfg)
                    log.add(epoch, step, "E_d", loss)
            step += 1
            if callback is not None:
                callback(model, step)
    return log


def _fresh(dataset, cfg, model):
    if model is None:
        model = init_model(dataset.n_bs, dataset.features.shape[2], cfg.seed, dataset.scaler)
    model.scaler = dataset.scaler
    return model


def train_semisupervised(dataset, cfg, model=None, callback=None):
    """Run the three-stage schedule for ``cfg.epochs`` epochs; returns (model, LossLog).

    One epoch is one pass over the unlabeled training rows in minibatches
    of ``batch_unlabeled``; labeled minibatches are drawn from a reshuffled
    stream so every unlabeled batch gets a partner.
    """
    Xu, Xl, yl = _prepare(dataset)
    if len(Xl) == 0:
        raise ContractError("semi-supervised training needs labeled training rows")
    model = _fresh(dataset, cfg, model)
    log = _run(model, Xu, Xl, yl, cfg, supervised=True, unsupervised=True, callback=callback)
    model.meta.update(mode="semi", train=cfg.to_dict())
    return model, log


def train_unsupervised_baseline(dataset, cfg, model=None, callback=None):
    """Same schedule with the two supervised stages skipped."""
    Xu, Xl, yl = _prepare(dataset)
    model = _fresh(dataset, cfg, model)
    log = _run(model, Xu, Xl, yl, cfg, supervised=False, unsupervised=True, callback=callback)
    model.meta.update(mode="unsup", train=cfg.to_dict())
    return model, log


def train_supervised_baseline(dataset, cfg, model=None, callback=None):
    """Minimise ``E_e`` alone over the labeled training rows."""
    Xu, Xl, yl = _prepare(dataset)
    if len(Xl) == 0:
        raise ContractError("supervised training needs labeled training rows")
    model = _fresh(dataset, cfg, model)
    log = _run(model, Xu, Xl, yl, cfg, supervised=True, unsupervised=False, callback=callback)
    model.meta.update(mode="sup", train=cfg.to_dict())
    return model, log


TRAINERS = {"semi": train_semisupervised, "unsup": train_unsupervised_baseline,
            "sup": train_supervised_baseline}


# -------------------------------------------------------------- inference

def encode(model, X):
    """Encoder output in (0,1)^3 for normalised features, one sample at a time."""
    X = np.asarray(X, float)
    single = X.ndim == 2
    X = X[None] if single else X
    out = np.empty((len(X), 3))
    for i in range(len(X)):
        out[i] = nn.forward(model.encoder, model.enc_params, X[i:i + 1])[0][0]
    return out[0] if single else out


def decode(model, Z):
    Z = np.asarray(Z, float)
    single = Z.ndim == 1
    Z = Z[None] if single else Z
    out = np.empty((len(Z),) + model.decoder.out_shape)
    for i in range(len(Z)):
        out[i] = nn.forward(model.decoder, model.dec_params, Z[i:i + 1])[0][0]
    return out[0] if single else out


def reconstruct(model, X):
    """``D(C(X))`` through the split encoder/decoder interfaces."""
    return decode(model, encode(model, X))


def predict_location(model, features):
    """Positions in metres for raw (un-normalised) features of shape (B, 5L) or (n, B, 5L)."""
    if model.scaler is None:
        raise ScalerStateError("model has no scaler; cannot normalise raw features")
    return model.scaler.inverse_labels(encode(model, model.scaler.transform_features(features)))


def predict_csi(model, location, raw=False):
    """Decoder output for a location in metres, in normalised feature units unless ``raw``."""
    if model.scaler is None:
        raise ScalerStateError("model has no scaler; cannot normalise locations")
    loc = np.asarray(location, float)
    if np.any(loc < model.scaler.label_min) or np.any(loc > model.scaler.label_max):
        warnings.warn("location outside the scene bounds", RuntimeWarning, stacklevel=2)
    out = decode(model, model.scaler.transform_labels(loc))
    if raw:
        out = model.scaler.feature_mean + model.scaler.feature_std * out
    return out


def location_bounds(scaler):
    """Box reachable by :func:`predict_location` (the sigmoid range mapped to metres)."""
    return scaler.inverse_labels(np.zeros(3)), scaler.inverse_labels(np.ones(3))


# ------------------------------------------------------------ checkpoints

def save_model(model, path, extra=None):
    header = {"format": "ccloc.model", "version": 1, "architecture": model.architecture(),
              "architecture_hash": model.architecture_hash(), "enc_size": model.enc_params.size,
              "scaler": None if model.scaler is None else model.scaler.to_dict(),
              "meta": model.meta}
    header.update(extra or {})
    nn.save_checkpoint(path, header, np.concatenate([model.enc_params.flat, model.dec_params.flat]))


def load_model(path):
    header, flat = nn.load_checkpoint(path)
    if header.get("format") != "ccloc.model":
        raise ValueError(f"{path}: not a model checkpoint")
    arch = header["architecture"]
    n_bs, n_feat = arch["input_shape"]
    model = init_model(n_bs, n_feat, seed=0)
    if model.architecture_hash() != header["architecture_hash"]:
        raise ValueError(f"{path}: architecture does not match this version of the code")
    k = header["enc_size"]
    model.enc_params.flat[:] = flat[:k]
    model.dec_params.flat[:] = flat[k:]
    model.enc_params.touch()
    model.dec_params.touch()
    if header["scaler"] is not None:
        model.scaler = Scaler.from_dict(header["scaler"])
    model.meta = header.get("meta", {})
    return model, header
