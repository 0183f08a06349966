"""Noise schedule, score-function contract, analytic scores and DSM training.

The trainable model is a small sigma-conditioned convolutional denoiser with
hand-derived backpropagation: at desk scale (32..64 px images, 3 conv layers)
explicit gradients keep the package self-contained and bit-reproducible.

Parameterization: the network consumes x / sqrt(sigma^2 + c^2) plus a constant
log-sigma channel and predicts ``raw``; the score is ``raw / sigma``. With the
usual sigma^2 weighting of the denoising-score-matching objective the training
loss reduces to mean((raw + z)^2), which is well conditioned across the whole
noise range.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "NoiseSchedule",
    "sigma_at",
    "GaussianMixturePrior",
    "analytic_score",
    "mixture_log_density",
    "AnalyticPriorScore",
    "ZeroScore",
    "DenoiserScore",
    "ConvDenoiser",
    "TrainConfig",
    "dsm_train",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric sigma ladder: sigma_i = sigma_min * (sigma_max/sigma_min)^(i/(T-1))."""

    sigma_min: float
    sigma_max: float
    n_steps: int

    def __post_init__(self):
        if not (self.sigma_min > 0):
            raise ValueError("sigma_min must be > 0")
        if not (self.sigma_max > self.sigma_min):
            raise ValueError("sigma_max must exceed sigma_min")
        if self.n_steps < 2:
            raise ValueError("need at least 2 steps")

    def sigmas(self) -> np.ndarray:
        i = np.arange(self.n_steps, dtype=np.float64)
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** (i / (self.n_steps - 1))


def sigma_at(schedule: NoiseSchedule, i: int) -> float:
    if not 0 <= i < schedule.n_steps:
        raise IndexError(f"step index {i} outside [0, {schedule.n_steps})")
    return float(schedule.sigma_min *
                 (schedule.sigma_max / schedule.sigma_min) ** (i / (schedule.n_steps - 1)))


# --- analytic scores for verification ---

@dataclass(frozen=True)
class GaussianMixturePrior:
    """Isotropic Gaussian mixture; components are (mean, variance, weight).

    Means may be scalars or arrays broadcastable to the probe shape.
    """

    components: tuple

    def __post_init__(self):
        comps = []
        total = 0.0
        for mean, var, weight in self.components:
            if not (var > 0):
                raise ValueError("component variances must be > 0")
            if not (weight > 0):
                raise ValueError("component weights must be > 0")
            mean_arr = np.asarray(mean, dtype=np.float64)
            comps.append((mean_arr, float(var), float(weight)))
            total += weight
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {total}")
        object.__setattr__(self, "components", tuple(comps))


def _log_responsibilities(prior: GaussianMixturePrior, x: np.ndarray, sigma: float):
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    logs = np.empty(len(prior.components))
    for k, (mean, var, weight) in enumerate(prior.components):
        v = var + sigma * sigma
        diff = x - mean
        logs[k] = math.log(weight) - 0.5 * d * math.log(2.0 * math.pi * v) \
            - 0.5 * float(np.sum(diff * diff)) / v
    return logs


def mixture_log_density(prior: GaussianMixturePrior, x: np.ndarray, sigma: float) -> float:
    logs = _log_responsibilities(prior, x, sigma)
    m = logs.max()
    return float(m + np.log(np.sum(np.exp(logs - m))))


def analytic_score(prior: GaussianMixturePrior, x: np.ndarray, sigma: float) -> np.ndarray:
    """Exact grad-log-density of the sigma-perturbed mixture at x.

    Each component's variance widens to var + sigma^2; responsibilities are
    evaluated in log space so far-out probes stay finite.
    """
    x = np.asarray(x, dtype=np.float64)
    logs = _log_responsibilities(prior, x, sigma)
    logs -= logs.max()
    resp = np.exp(logs)
    resp /= resp.sum()
    out = np.zeros_like(x)
    for (mean, var, weight), r in zip(prior.components, resp):
        out += r * (mean - x) / (var + sigma * sigma)
    return out


class AnalyticPriorScore:
    """ScoreFunction backed by a Gaussian-mixture prior; exact, for verification."""

    def __init__(self, prior: GaussianMixturePrior, schedule: NoiseSchedule):
        self.prior = prior
        self.schedule = schedule

    def evaluate(self, x: np.ndarray, i: int) -> np.ndarray:
        return analytic_score(self.prior, x, sigma_at(self.schedule, i))

    def evaluate_batch(self, xs: np.ndarray, i: int) -> np.ndarray:
        sigma = sigma_at(self.schedule, i)
        return np.stack([analytic_score(self.prior, x, sigma) for x in xs])


class ZeroScore:
    """Identically-zero score field (degenerate-config testing)."""

    def evaluate(self, x: np.ndarray, i: int) -> np.ndarray:
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def evaluate_batch(self, xs: np.ndarray, i: int) -> np.ndarray:
        return np.zeros_like(np.asarray(xs, dtype=np.float64))


# --- trainable denoiser ---

def _conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None):
    """Same-padding stride-1 correlation. x: (B,Cin,H,W), weight: (Co,Cin,k,k)."""
    b, cin, h, w = x.shape
    co = weight.shape[0]
    k = weight.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (B,Cin,H,W,k,k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, cin * k * k)
    out = cols @ weight.reshape(co, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(b, h, w, co).transpose(0, 3, 1, 2)
    return out, cols


def _conv2d_input_grad(gout: np.ndarray, weight: np.ndarray) -> np.ndarray:
    # adjoint of same-padding correlation: correlate with the flipped, transposed kernel
    w_t = np.ascontiguousarray(weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    gx, _ = _conv2d(gout, w_t, None)
    return gx


class ConvDenoiser:
    """Sigma-conditioned convolutional score network with explicit gradients.

    Inputs are two channels (scaled image, normalized log-sigma map); three
    stacked convolutions with ReLU in between produce the correction term. A
    residual gain, learned separately per noise level, multiplies the scaled
    input: that path carries the Bayes-optimal linear part of the score at
    every level (and the exact high-noise asymptote raw = -x_scaled at init),
    leaving the convolutions to model spatial structure.
    """

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "gain")

    def __init__(self, schedule: NoiseSchedule, hidden_channels: int = 16,
                 kernel: int = 3, data_scale: float = 1.0, seed: int = 0):
        self.schedule = schedule
        self.hidden_channels = int(hidden_channels)
        self.kernel = int(kernel)
        self.data_scale = float(data_scale)
        self.seed = int(seed)
        c, k = self.hidden_channels, self.kernel
        rng = np.random.Generator(np.random.PCG64(seed))

        def he(co, ci):
            return rng.standard_normal((co, ci, k, k)) * math.sqrt(2.0 / (ci * k * k))

        self.params = {
            "w1": he(c, 2),
            "b1": np.zeros(c),
            "w2": he(c, c),
            "b2": np.zeros(c),
            # zero-init final conv: the model starts exactly at the residual path
            "w3": np.zeros((1, c, k, k)),
            "b3": np.zeros(1),
            "gain": np.full(schedule.n_steps, -1.0),
        }

    # descriptor for checkpoints and manifests
    def architecture(self) -> dict:
        n_layers = 3
        return {
            "kind": "conv_residual_denoiser",
            "hidden_channels": self.hidden_channels,
            "kernel": self.kernel,
            "n_layers": n_layers,
            "receptive_field": n_layers * (self.kernel - 1) + 1,
            "conditioning": "log-sigma channel, input scaled by 1/sqrt(sigma^2+c^2)",
            "data_scale": self.data_scale,
            "n_params": self.n_params(),
            "init_seed": self.seed,
        }

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.PARAM_NAMES])

    def set_flat_params(self, flat: np.ndarray) -> None:
        pos = 0
        for n in self.PARAM_NAMES:
            p = self.params[n]
            self.params[n] = np.asarray(flat[pos:pos + p.size], dtype=np.float64).reshape(p.shape)
            pos += p.size
        if pos != flat.size:
            raise ValueError(f"parameter vector has {flat.size} entries, expected {pos}")

    def level_of(self, sigma: float) -> int:
        """Nearest schedule index for a noise level (log-metric)."""
        span = math.log(self.schedule.sigma_max) - math.log(self.schedule.sigma_min)
        frac = (math.log(sigma) - math.log(self.schedule.sigma_min)) / span
        return int(np.clip(round(frac * (self.schedule.n_steps - 1)), 0, self.schedule.n_steps - 1))

    def _inputs(self, x: np.ndarray, sigma: np.ndarray):
        c2 = self.data_scale ** 2
        scale = 1.0 / np.sqrt(sigma ** 2 + c2)
        xs = x * scale[:, None, None]
        span = math.log(self.schedule.sigma_max) - math.log(self.schedule.sigma_min)
        tval = 2.0 * (np.log(sigma) - math.log(self.schedule.sigma_min)) / span - 1.0
        tmap = np.broadcast_to(tval[:, None, None], x.shape)
        return np.stack([xs, tmap], axis=1), xs

    def _forward(self, x: np.ndarray, sigma: np.ndarray, lvl: np.ndarray):
        inp, xs = self._inputs(x, sigma)
        p = self.params
        z1, cols1 = _conv2d(inp, p["w1"], p["b1"])
        a1 = np.maximum(z1, 0.0)
        z2, cols2 = _conv2d(a1, p["w2"], p["b2"])
        a2 = np.maximum(z2, 0.0)
        z3, cols3 = _conv2d(a2, p["w3"], p["b3"])
        raw = z3[:, 0] + p["gain"][lvl][:, None, None] * xs
        cache = (cols1, z1, cols2, z2, cols3, xs, lvl)
        return raw, cache

    def _backward(self, g_raw: np.ndarray, cache):
        cols1, z1, cols2, z2, cols3, xs, lvl = cache
        p = self.params
        b, h, w = g_raw.shape
        g_gain = np.zeros_like(p["gain"])
        np.add.at(g_gain, lvl, np.sum(g_raw * xs, axis=(1, 2)))
        grads = {"gain": g_gain}

        g3 = g_raw[:, None, :, :]  # (B,1,H,W)
        g3_mat = g3.transpose(0, 2, 3, 1).reshape(b * h * w, 1)
        grads["w3"] = (g3_mat.T @ cols3).reshape(p["w3"].shape)
        grads["b3"] = g3_mat.sum(axis=0)

        ga2 = _conv2d_input_grad(g3, p["w3"])
        g2 = ga2 * (z2 > 0.0)
        g2_mat = g2.transpose(0, 2, 3, 1).reshape(b * h * w, -1)
        grads["w2"] = (g2_mat.T @ cols2).reshape(p["w2"].shape)
        grads["b2"] = g2_mat.sum(axis=0)

        ga1 = _conv2d_input_grad(g2, p["w2"])
        g1 = ga1 * (z1 > 0.0)
        g1_mat = g1.transpose(0, 2, 3, 1).reshape(b * h * w, -1)
        grads["w1"] = (g1_mat.T @ cols1).reshape(p["w1"].shape)
        grads["b1"] = g1_mat.sum(axis=0)
        return grads

    def loss_and_grads(self, x_noisy: np.ndarray, z: np.ndarray,
                       sigma: np.ndarray, lvl: np.ndarray):
        """Sigma^2-weighted DSM loss mean((raw + z)^2) and parameter gradients."""
        raw, cache = self._forward(x_noisy, sigma, lvl)
        diff = raw + z
        loss = float(np.mean(diff * diff))
        g_raw = (2.0 / diff.size) * diff
        return loss, self._backward(g_raw, cache)

    def score_batch(self, xs: np.ndarray, sigma: float, lvl: int | None = None) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        if lvl is None:
            lvl = self.level_of(float(sigma))
        sig = np.full(xs.shape[0], float(sigma))
        lvls = np.full(xs.shape[0], int(lvl))
        raw, _ = self._forward(xs, sig, lvls)
        return raw / float(sigma)

    def score(self, x: np.ndarray, sigma: float, lvl: int | None = None) -> np.ndarray:
        return self.score_batch(np.asarray(x, dtype=np.float64)[None], sigma, lvl)[0]


class DenoiserScore:
    """ScoreFunction adapter around a trained :class:`ConvDenoiser`."""

    def __init__(self, model: ConvDenoiser, schedule: NoiseSchedule | None = None):
        self.model = model
        self.schedule = schedule or model.schedule

    def evaluate(self, x: np.ndarray, i: int) -> np.ndarray:
        # the model resolves its own gain level from sigma, so a sampler may
        # run a coarser schedule than the one the model was trained on
        return self.model.score(x, sigma_at(self.schedule, i))

    def evaluate_batch(self, xs: np.ndarray, i: int) -> np.ndarray:
        return self.model.score_batch(np.asarray(xs, dtype=np.float64),
                                      sigma_at(self.schedule, i))


class _Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 8
    epochs: int = 20
    steps_per_epoch: int = 100
    seed: int = 0


def dsm_train(dataset, schedule: NoiseSchedule, model: ConvDenoiser,
              cfg: TrainConfig) -> tuple[ConvDenoiser, list[float]]:
    """Denoising score matching on ``dataset`` (Images or arrays sharing one shape).

    Per sample: i ~ U{0..T-1}, x_t = x0 + sigma_i * z, target score -z/sigma_i.
    Seeded and reproducible; per-epoch mean losses are returned. A non-finite
    loss aborts immediately.
    """
    if schedule != model.schedule:
        raise ValueError("training schedule must match the model's schedule "
                         "(the per-level residual gain is indexed by it)")
    arrays = [getattr(d, "values", d) for d in dataset]
    if not arrays:
        raise ValueError("dataset must be nonempty")
    shape = np.asarray(arrays[0]).shape
    for a in arrays:
        if np.asarray(a).shape != shape:
            raise ValueError("all training images must share one grid")
    data = np.stack([np.asarray(a, dtype=np.float64) for a in arrays])

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    sigmas = schedule.sigmas()
    opt = _Adam(model.params, cfg.learning_rate)
    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        losses = np.empty(cfg.steps_per_epoch)
        for step in range(cfg.steps_per_epoch):
            idx = rng.integers(0, data.shape[0], size=cfg.batch_size)
            lvl = rng.integers(0, schedule.n_steps, size=cfg.batch_size)
            sig = sigmas[lvl]
            z = rng.standard_normal((cfg.batch_size,) + shape)
            x_noisy = data[idx] + sig[:, None, None] * z
            loss, grads = model.loss_and_grads(x_noisy, z, sig, lvl)
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"dsm_train: loss became non-finite at epoch {epoch}, step {step}")
            opt.step(model.params, grads)
            losses[step] = loss
        epoch_losses.append(float(losses.mean()))
    return model, epoch_losses


# --- checkpoints: descriptor JSON + little-endian float32 params + sha256 ---

_CKPT_MAGIC = b"DOSMCKPT1\n"


def save_checkpoint(path, model: ConvDenoiser) -> None:
    payload = np.ascontiguousarray(model.flat_params(), dtype="<f4").tobytes()
    header = {
        "format": "dosmct-score-checkpoint",
        "version": 1,
        "architecture": model.architecture(),
        "schedule": {
            "sigma_min": model.schedule.sigma_min,
            "sigma_max": model.schedule.sigma_max,
            "n_steps": model.schedule.n_steps,
        },
        "param_dtype": "<f4",
        "n_params": model.n_params(),
        "params_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> ConvDenoiser:
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a dosmct checkpoint")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header["params_sha256"]:
        raise ValueError(f"{path}: checkpoint payload failed integrity check")
    sched = NoiseSchedule(**header["schedule"])
    arch = header["architecture"]
    model = ConvDenoiser(sched, hidden_channels=arch["hidden_channels"],
                         kernel=arch["kernel"], data_scale=arch["data_scale"],
                         seed=arch.get("init_seed", 0))
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    model.set_flat_params(flat)
    return model
