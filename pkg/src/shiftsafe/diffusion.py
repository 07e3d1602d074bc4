"""Conditional denoising diffusion over scalar prediction errors.

The forward process drifts toward a pretrained conditional-mean encoder, so
the residual ``s - f(c)`` follows an ordinary DDPM.  Sampling runs the
reverse chain on that residual.  Weights are stored as numpy arrays; torch
fits them and runs the batched reverse chain.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

FORMAT_VERSION = 1
CONTEXT_DIM = 4
_ACTIVATIONS = ("relu", "silu", "identity")


class SamplingError(RuntimeError):
    pass


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class VarianceSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T_diff(self) -> int:
        return self.betas.size

    def ab(self, j) -> np.ndarray:
        """Cumulative retention with the ``alpha_bar_0 = 1`` convention."""
        j = np.asarray(j)
        return np.where(j == 0, 1.0, self.alpha_bars[np.maximum(j, 1) - 1])


def make_schedule(T_diff: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> VarianceSchedule:
    if T_diff < 1:
        raise ValueError("T_diff must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T_diff) if T_diff > 1 else np.array([beta_start])
    alphas = 1.0 - betas
    return VarianceSchedule(betas, alphas, np.cumprod(alphas))


def forward_sample(schedule: VarianceSchedule, s0, fphi, j: int, noise):
    """Noisy state at step ``j`` drifting from ``s0`` toward ``fphi``."""
    if not 1 <= j <= schedule.T_diff:
        raise ValueError("j out of range")
    ab = schedule.alpha_bars[j - 1]
    return math.sqrt(ab) * np.asarray(s0) + (1.0 - math.sqrt(ab)) * np.asarray(fphi) \
        + math.sqrt(1.0 - ab) * np.asarray(noise)


def step_embedding(j, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding of integer steps, shape (..., dim)."""
    j = np.asarray(j, dtype=np.float64)[..., None]
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half, 1))
    return np.concatenate([np.sin(j * freqs), np.cos(j * freqs)], axis=-1)


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class ContextVector:
    eta: float
    t: float
    h: float
    i: float

    def as_array(self) -> np.ndarray:
        return np.array([self.eta, self.t, self.h, self.i], dtype=float)


@dataclass
class DiffusionConfig:
    T_diff: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    enc_hidden: Tuple[int, ...] = (64, 64)
    net_hidden: Tuple[int, ...] = (128, 128)
    emb_dim: int = 16
    activation: str = "relu"
    enc_epochs: int = 20
    epochs: int = 30
    batch: int = 256
    lr: float = 1e-3
    seed: int = 0


Layers = List[Tuple[np.ndarray, np.ndarray]]


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "silu":
        return x / (1.0 + np.exp(-x))
    return x


def _mlp(layers: Layers, x: np.ndarray, act: str) -> np.ndarray:
    for k, (W, b) in enumerate(layers):
        x = x @ W + b
        if k < len(layers) - 1:
            x = _act(act, x)
    return x


def _init_layers(sizes: Sequence[int], rng: np.random.Generator) -> Layers:
    out = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        lim = 1.0 / math.sqrt(a)
        out.append((rng.uniform(-lim, lim, size=(a, b)).astype(np.float32),
                    rng.uniform(-lim, lim, size=b).astype(np.float32)))
    return out


@dataclass
class DiffusionModel:
    """Encoder + noise network with frozen input and target standardization."""

    schedule: VarianceSchedule
    encoder: Layers
    noise_net: Layers
    ctx_mean: np.ndarray
    ctx_std: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0
    activation: str = "relu"
    emb_dim: int = 16
    train_meta: Dict = field(default_factory=dict)
    E_table: Optional[np.ndarray] = None  # held-out noise MSE per step, standardized units

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation}")
        self._emb_cache = None

    # -- construction
    @classmethod
    def init(cls, cfg: DiffusionConfig, contexts: np.ndarray, targets: np.ndarray) -> "DiffusionModel":
        C = np.asarray(contexts, dtype=float).reshape(-1, CONTEXT_DIM)
        y = np.asarray(targets, dtype=float).ravel()
        if y.size == 0:
            raise ValueError("empty dataset")
        mean, std = C.mean(axis=0), C.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        y_std = float(y.std())
        rng = np.random.default_rng(cfg.seed)
        enc = _init_layers([CONTEXT_DIM, *cfg.enc_hidden, 1], rng)
        net = _init_layers([2 + CONTEXT_DIM + cfg.emb_dim, *cfg.net_hidden, 1], rng)
        return cls(make_schedule(cfg.T_diff, cfg.beta_start, cfg.beta_end), enc, net, mean, std,
                   float(y.mean()), y_std if y_std > 1e-12 else 1.0, cfg.activation, cfg.emb_dim,
                   {"config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}})

    @classmethod
    def constant(cls, value: float, cfg: DiffusionConfig = DiffusionConfig()) -> "DiffusionModel":
        """Degenerate model whose every sample equals ``value``."""
        m = cls.init(cfg, np.zeros((1, CONTEXT_DIM)), np.zeros(1))
        m.zero_weights()
        m.y_mean, m.y_scale = float(value), 0.0
        return m

    def zero_weights(self) -> None:
        self.encoder = [(np.zeros_like(W), np.zeros_like(b)) for W, b in self.encoder]
        self.noise_net = [(np.zeros_like(W), np.zeros_like(b)) for W, b in self.noise_net]
        self._emb_cache = None

    # -- standardization
    def std_context(self, C) -> np.ndarray:
        C = np.asarray(C, dtype=float).reshape(-1, CONTEXT_DIM)
        return (C - self.ctx_mean) / self.ctx_std

    def to_model_units(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_mean) / (self.y_scale if self.y_scale > 0 else 1.0)

    def to_raw_units(self, s) -> np.ndarray:
        return self.y_mean + self.y_scale * np.asarray(s)

    # -- networks
    def encode(self, C) -> np.ndarray:
        """Conditional mean in model units for raw contexts (rows)."""
        return _mlp(self.encoder, self.std_context(C), self.activation)[:, 0]

    def eps(self, s, j, fphi, c_std) -> np.ndarray:
        s = np.asarray(s, dtype=float).ravel()
        fphi = np.broadcast_to(np.asarray(fphi, dtype=float), s.shape)
        c_std = np.broadcast_to(np.asarray(c_std, dtype=float), (s.size, CONTEXT_DIM))
        emb = step_embedding(np.broadcast_to(np.asarray(j), s.shape), self.emb_dim)
        x = np.column_stack([s, fphi, c_std, emb])
        return _mlp(self.noise_net, x, self.activation)[:, 0]

    def score(self, s, j, fphi, c_std) -> np.ndarray:
        """Score estimate ``-eps / sqrt(1 - alpha_bar_j)``."""
        ab = self.schedule.ab(np.asarray(j))
        return -self.eps(s, j, fphi, c_std) / np.sqrt(1.0 - ab)

    # -- sampling
    def _sampler_tensors(self):
        if self._emb_cache is None:
            torch = _torch()
            W1, b1 = self.noise_net[0]
            emb = step_embedding(np.arange(1, self.schedule.T_diff + 1), self.emb_dim)
            steps = emb @ W1[2 + CONTEXT_DIM:].astype(np.float64) + b1
            rest = [(torch.from_numpy(np.ascontiguousarray(W, dtype=np.float32)),
                     torch.from_numpy(np.asarray(b, dtype=np.float32))) for W, b in self.noise_net[1:]]
            self._emb_cache = (torch.from_numpy(steps.astype(np.float32)),
                               torch.from_numpy(np.asarray(W1[0], dtype=np.float32)), rest)
        return self._emb_cache

    def sample_residual(self, C, noise: np.ndarray) -> np.ndarray:
        """Reverse chain on residuals for raw contexts ``C``; returns raw-unit samples.

        ``noise`` has shape (T_diff, M): row 0 seeds the chain and row ``k``
        is the injected noise for the transition out of step ``T_diff - k + 1``.
        """
        C = np.asarray(C, dtype=float).reshape(-1, CONTEXT_DIM)
        M = C.shape[0]
        if noise.shape != (self.schedule.T_diff, M):
            raise ValueError(f"noise must have shape {(self.schedule.T_diff, M)}")
        if M == 0:
            return np.zeros(0)
        if self.y_scale == 0.0:
            return np.full(M, self.y_mean)
        torch = _torch()
        c_std = self.std_context(C)
        f = _mlp(self.encoder, c_std, self.activation)[:, 0]
        W1 = self.noise_net[0][0]
        ctx = torch.from_numpy((np.column_stack([f, c_std])
                                @ W1[1:2 + CONTEXT_DIM].astype(np.float64)).astype(np.float32))
        steps, w_s, rest = self._sampler_tensors()
        act = {"relu": lambda z: z.clamp_(min=0.0), "silu": torch.nn.functional.silu,
               "identity": lambda z: z}[self.activation]
        sched = self.schedule
        coef = (sched.betas / np.sqrt(1.0 - sched.alpha_bars)).tolist()
        inv_sa = (1.0 / np.sqrt(sched.alphas)).tolist()
        sb = np.sqrt(sched.betas).tolist()
        fz = torch.from_numpy(f.astype(np.float32))
        z = torch.from_numpy(np.ascontiguousarray(noise, dtype=np.float32))
        x = z[0].clone()
        h = torch.empty(M, w_s.numel())
        T = sched.T_diff
        with torch.no_grad():
            for k, j in enumerate(range(T, 0, -1)):
                torch.addcmul(ctx, (x + fz)[:, None], w_s, out=h)
                h.add_(steps[j - 1])
                hh = act(h)
                for W, b in rest[:-1]:
                    hh = act(torch.addmm(b, hh, W))
                W, b = rest[-1]
                e = torch.addmm(b, hh, W)[:, 0]
                x = (x - coef[j - 1] * e) * inv_sa[j - 1]
                if j > 1:
                    x.add_(z[k + 1], alpha=sb[j - 1])
        out = self.to_raw_units(x.numpy().astype(np.float64) + f)
        if not np.all(np.isfinite(out)):
            bad = np.flatnonzero(~np.isfinite(out))
            raise SamplingError(f"{bad.size} non-finite draws, first at index {bad[0]}")
        return out

    def sample_contexts(self, C, rng: np.random.Generator, chunk: int = 8192) -> np.ndarray:
        C = np.asarray(C, dtype=float).reshape(-1, CONTEXT_DIM)
        out = np.empty(C.shape[0])
        for a in range(0, C.shape[0], chunk):
            b = min(a + chunk, C.shape[0])
            noise = rng.standard_normal((self.schedule.T_diff, b - a), dtype=np.float32)
            out[a:b] = self.sample_residual(C[a:b], noise)
        return out

    # -- serialization
    def to_json(self) -> dict:
        def lay(layers):
            return [{"W": W.tolist(), "b": b.tolist(), "shape": list(W.shape)} for W, b in layers]
        s = self.schedule
        return {
            "format_version": FORMAT_VERSION,
            "schedule": {"betas": s.betas.tolist()},
            "encoder": lay(self.encoder), "noise_net": lay(self.noise_net),
            "ctx_mean": self.ctx_mean.tolist(), "ctx_std": self.ctx_std.tolist(),
            "y_mean": self.y_mean, "y_scale": self.y_scale,
            "activation": self.activation, "emb_dim": self.emb_dim,
            "train_meta": self.train_meta,
            "E_table": None if self.E_table is None else self.E_table.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "DiffusionModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format_version')}")
        betas = np.asarray(d["schedule"]["betas"], dtype=float)
        alphas = 1.0 - betas
        sched = VarianceSchedule(betas, alphas, np.cumprod(alphas))

        def lay(items):
            return [(np.asarray(it["W"], dtype=np.float32).reshape(it["shape"]),
                     np.asarray(it["b"], dtype=np.float32)) for it in items]
        E = d.get("E_table")
        return cls(sched, lay(d["encoder"]), lay(d["noise_net"]),
                   np.asarray(d["ctx_mean"], dtype=float), np.asarray(d["ctx_std"], dtype=float),
                   float(d["y_mean"]), float(d["y_scale"]), d["activation"], int(d["emb_dim"]),
                   d.get("train_meta", {}), None if E is None else np.asarray(E, dtype=float))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- training

def _torch():
    import torch
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    return torch


def _torch_mlp(layers: Layers, act: str):
    torch = _torch()
    mods = []
    for k, (W, b) in enumerate(layers):
        lin = torch.nn.Linear(W.shape[0], W.shape[1])
        with torch.no_grad():
            lin.weight.copy_(torch.from_numpy(np.ascontiguousarray(W.T, dtype=np.float32)))
            lin.bias.copy_(torch.from_numpy(np.asarray(b, dtype=np.float32)))
        mods.append(lin)
        if k < len(layers) - 1:
            mods.append({"relu": torch.nn.ReLU, "silu": torch.nn.SiLU, "identity": torch.nn.Identity}[act]())
    return torch.nn.Sequential(*mods)


def _export(seq) -> Layers:
    torch = _torch()
    out = []
    for m in seq:
        if isinstance(m, torch.nn.Linear):
            out.append((m.weight.detach().numpy().T.astype(np.float32).copy(),
                        m.bias.detach().numpy().astype(np.float32).copy()))
    return out


def _lr_at(step: int, total: int, lr: float) -> float:
    """Linear decay to a tenth of the base rate."""
    return lr * (1.0 - 0.9 * step / max(total, 1))


def pretrain_encoder(model: DiffusionModel, contexts, targets, epochs: int = 20, lr: float = 1e-3,
                     seed: int = 0, batch: int = 256) -> DiffusionModel:
    """Fit the conditional-mean encoder by mini-batch Adam on squared error."""
    torch = _torch()
    X = torch.from_numpy(model.std_context(contexts).astype(np.float32))
    Y = torch.from_numpy(model.to_model_units(targets).astype(np.float32).ravel())
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = _torch_mlp(model.encoder, model.activation)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = X.shape[0]
    total = epochs * max(1, math.ceil(n / batch))
    step, losses = 0, []
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        acc = 0.0
        for a in range(0, n, batch):
            idx = perm[a:a + batch]
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, total, lr)
            loss = torch.mean((net(X[idx])[:, 0] - Y[idx]) ** 2)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"encoder loss became {loss.item()} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            acc += loss.item() * idx.numel()
            step += 1
        losses.append(acc / n)
    model.encoder = _export(net)
    model._emb_cache = None
    with torch.no_grad():
        final = float(torch.mean((net(X)[:, 0] - Y) ** 2))
    model.train_meta["encoder"] = {"epochs": epochs, "lr": lr, "seed": seed, "losses": losses,
                                   "final_mse": final}
    return model


def train_noise_net(model: DiffusionModel, contexts, targets, epochs: int = 30, batch: int = 256,
                    lr: float = 1e-3, seed: int = 0) -> DiffusionModel:
    """Regress injected noise from forward-diffused targets; the encoder stays frozen."""
    if epochs <= 0:
        return model
    torch = _torch()
    c_std = model.std_context(contexts)
    f = model.encode(contexts)
    y = model.to_model_units(targets).ravel()
    n = y.size
    C = torch.from_numpy(np.column_stack([f, c_std]).astype(np.float32))
    S0 = torch.from_numpy(y.astype(np.float32))
    F = torch.from_numpy(f.astype(np.float32))
    T = model.schedule.T_diff
    sab = torch.from_numpy(np.sqrt(model.schedule.alpha_bars).astype(np.float32))
    s1ab = torch.from_numpy(np.sqrt(1.0 - model.schedule.alpha_bars).astype(np.float32))
    emb = torch.from_numpy(step_embedding(np.arange(1, T + 1), model.emb_dim).astype(np.float32))
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = _torch_mlp(model.noise_net, model.activation)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    total = epochs * max(1, math.ceil(n / batch))
    step, losses = 0, []
    run_E, run_cnt = np.zeros(T), np.zeros(T)
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        acc = 0.0
        for a in range(0, n, batch):
            idx = perm[a:a + batch]
            m = idx.numel()
            j = torch.randint(0, T, (m,), generator=gen)
            e = torch.randn(m, generator=gen)
            sj = sab[j] * S0[idx] + (1.0 - sab[j]) * F[idx] + s1ab[j] * e
            x = torch.cat([sj[:, None], C[idx], emb[j]], dim=1)
            err = (net(x)[:, 0] - e) ** 2
            loss = err.mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"noise loss became {loss.item()} at step {step}")
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, total, lr)
            opt.zero_grad()
            loss.backward()
            opt.step()
            jn = j.numpy()
            np.add.at(run_E, jn, err.detach().numpy())
            np.add.at(run_cnt, jn, 1.0)
            acc += loss.item() * m
            step += 1
        losses.append(acc / n)
    model.noise_net = _export(net)
    model._emb_cache = None
    model.train_meta["noise_net"] = {
        "epochs": epochs, "batch": batch, "lr": lr, "seed": seed, "losses": losses,
        "running_E": (run_E / np.maximum(run_cnt, 1)).tolist(),
    }
    return model


def noise_mse_per_step(model: DiffusionModel, contexts, targets, seed: int = 0, reps: int = 1,
                       chunk: int = 65536) -> np.ndarray:
    """Held-out noise-prediction MSE for every step, in model units."""
    rng = np.random.default_rng(seed)
    C = np.asarray(contexts, dtype=float).reshape(-1, CONTEXT_DIM)
    y = model.to_model_units(targets).ravel()
    c_std = model.std_context(C)
    f = model.encode(C)
    T = model.schedule.T_diff
    E = np.zeros(T)
    for j in range(1, T + 1):
        tot, cnt = 0.0, 0
        for _ in range(reps):
            for a in range(0, y.size, chunk):
                b = min(a + chunk, y.size)
                e = rng.standard_normal(b - a)
                sj = forward_sample(model.schedule, y[a:b], f[a:b], j, e)
                tot += float(np.sum((model.eps(sj, j, f[a:b], c_std[a:b]) - e) ** 2))
                cnt += b - a
        E[j - 1] = tot / cnt
    return E


def fit(cfg: DiffusionConfig, contexts, targets, val_contexts=None, val_targets=None) -> DiffusionModel:
    """Initialize, pretrain the encoder, train the noise net, and record held-out E(j)."""
    model = DiffusionModel.init(cfg, contexts, targets)
    pretrain_encoder(model, contexts, targets, cfg.enc_epochs, cfg.lr, cfg.seed, cfg.batch)
    train_noise_net(model, contexts, targets, cfg.epochs, cfg.batch, cfg.lr, cfg.seed + 1)
    if val_contexts is not None:
        model.E_table = noise_mse_per_step(model, val_contexts, val_targets, seed=cfg.seed + 2)
    return model


def sample(model: DiffusionModel, c: ContextVector, n: int, seed) -> np.ndarray:
    """``n`` draws from the model at one context."""
    if n == 0:
        return np.zeros(0)
    rng = np.random.default_rng(seed)
    return model.sample_contexts(np.tile(c.as_array(), (n, 1)), rng)
