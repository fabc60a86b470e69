"""History encoder: hashing stub embedding plus a variational bottleneck.

The bottleneck is four small tanh perceptrons sharing a latent ``z``:

* encoder  e -> (mu, log sigma^2), z = mu + sigma * eps
* decoder  z -> e_hat                      (reconstruction)
* outcome  [z, onehot(a)] -> y_hat         (outcome relevance)
* critic   z -> action logits              (adversary for I(Z; A))

Gradients are derived by hand; :func:`grad_check` verifies them against
central finite differences.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .domain import LatentTable

ENCODER_KEYS = ("W1", "b1", "Wm", "bm", "Wv", "bv")
DECODER_KEYS = ("D1", "c1", "D2", "c2")
OUTCOME_KEYS = ("O1", "o1", "O2", "o2")
CRITIC_KEYS = ("Q1", "q1", "Q2", "q2")
PARAM_KEYS = ENCODER_KEYS + DECODER_KEYS + OUTCOME_KEYS + CRITIC_KEYS
COMPONENTS = ("recon", "outcome", "kl", "mi")


class TrainingError(RuntimeError):
    def __init__(self, message: str, trace: list[dict] | None = None):
        super().__init__(message)
        self.trace = trace or []


# --- stub embedding ----------------------------------------------------------

@dataclass(frozen=True)
class StubEmbedding:
    """Signed feature hashing of history text tokens and numeric slots.

    Token counts enter sublinearly (``1 + ln count``) and numeric slots through
    a signed ``log1p`` so neither the repeated layout tokens nor large counts
    swamp the normalized vector.
    """

    dim: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("encoder.embed_dim: must be >= 1")


def _hash64(token: str, seed: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little")


class _TokenHasher:
    """Caches each token's signed bucket as ``2 * bucket + negative``."""

    def __init__(self, spec: StubEmbedding):
        self.spec = spec
        self.codes: dict[str, int] = {}

    def code(self, token: str) -> int:
        c = self.codes.get(token)
        if c is None:
            h = _hash64(token, self.spec.seed)
            c = self.codes[token] = 2 * (h % self.spec.dim) + (h >> 63)
        return c

    def codes_for(self, tokens: list[str]) -> np.ndarray:
        known = self.codes
        for t in tokens:
            if t not in known:
                self.code(t)
        return np.fromiter(map(known.__getitem__, tokens), dtype=np.int64, count=len(tokens))


def _split_codes(codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return codes >> 1, 1.0 - 2.0 * (codes & 1)


@lru_cache(maxsize=16)
def _hasher(spec: StubEmbedding) -> _TokenHasher:
    return _TokenHasher(spec)


@lru_cache(maxsize=16)
def _slot_hash(spec: StubEmbedding, n_slots: int) -> tuple[np.ndarray, np.ndarray]:
    return _split_codes(_hasher(spec).codes_for([f"#slot:{j}" for j in range(n_slots)]))


def token_bucket(token: str, spec: StubEmbedding) -> tuple[int, float]:
    b, s = _split_codes(np.array([_hasher(spec).code(token)]))
    return int(b[0]), float(s[0])


def text_token_vector(text: str, spec: StubEmbedding) -> np.ndarray:
    """Signed-hash sublinear token counts (unnormalized)."""
    counts = Counter(text.split())
    counts.pop("|", None)
    if not counts:
        return np.zeros(spec.dim)
    tokens = list(counts)
    buckets, signs = _split_codes(_hasher(spec).codes_for(tokens))
    tf = 1.0 + np.log(np.fromiter(counts.values(), dtype=np.float64, count=len(tokens)))
    return np.bincount(buckets, weights=signs * tf, minlength=spec.dim)


def stub_embed(text: str, features: np.ndarray | None, spec: StubEmbedding,
               normalize: bool = True) -> np.ndarray:
    vec = text_token_vector(text, spec)
    if features is not None and len(features):
        x = np.asarray(features, dtype=np.float64)
        buckets, signs = _slot_hash(spec, x.size)
        vec += np.bincount(buckets, weights=signs * np.sign(x) * np.log1p(np.abs(x)), minlength=spec.dim)
    if normalize:
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
    return vec


# --- parameters ---------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0
    beta: float = 0.001
    alpha: float = 0.1

    def __post_init__(self):
        for name in ("lam", "beta", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"encoder.{name}: must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.2
    disc_lr: float = 0.2
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    disc_steps: int = 1
    # global gradient-norm cap per update; 0 disables
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.clip_norm < 0:
            raise ValueError("encoder.clip_norm: must be >= 0")
        if self.lr <= 0 or self.disc_lr <= 0:
            raise ValueError("encoder.lr / encoder.disc_lr: learning rates must be positive")
        if self.epochs < 0:
            raise ValueError("encoder.epochs: must be >= 0")
        if self.batch_size < 1:
            raise ValueError("encoder.batch_size: must be >= 1")
        if self.disc_steps < 0:
            raise ValueError("encoder.disc_steps: must be >= 0")


@dataclass
class EncoderParams:
    embed_dim: int
    hidden: int
    latent_dim: int
    action_count: int
    arrays: dict[str, np.ndarray]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        E, h, d, A = self.embed_dim, self.hidden, self.latent_dim, self.action_count
        return {
            "W1": (E, h), "b1": (h,), "Wm": (h, d), "bm": (d,), "Wv": (h, d), "bv": (d,),
            "D1": (d, h), "c1": (h,), "D2": (h, E), "c2": (E,),
            "O1": (d + A, h), "o1": (h,), "O2": (h, 1), "o2": (1,),
            "Q1": (d, h), "q1": (h,), "Q2": (h, A), "q2": (A,),
        }

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.embed_dim, self.hidden, self.latent_dim, self.action_count,
                             {k: v.copy() for k, v in self.arrays.items()}, self.seed, dict(self.meta))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_KEYS])

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]


def init_params(embed_dim: int = 256, hidden: int = 64, latent_dim: int = 16,
                action_count: int = 7, seed: int = 0) -> EncoderParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    p = EncoderParams(embed_dim, hidden, latent_dim, action_count, {}, seed)
    for key, shape in p.shapes().items():
        if len(shape) == 2:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            p.arrays[key] = rng.uniform(-a, a, size=shape)
        else:
            p.arrays[key] = np.zeros(shape)
    return p


# --- forward / backward -------------------------------------------------------

@dataclass
class Batch:
    e: np.ndarray  # (n, E)
    a: np.ndarray  # (n,)
    y: np.ndarray  # (n,)
    noise: np.ndarray  # (n, d)

    def __len__(self) -> int:
        return self.e.shape[0]


def encode(params: EncoderParams, e: np.ndarray, noise: np.ndarray | None = None):
    """Return (mu, sigma, z); without noise z is the posterior mean."""
    e = np.asarray(e, dtype=np.float64)
    squeeze = e.ndim == 1
    e2 = np.atleast_2d(e)
    if e2.shape[1] != params.embed_dim:
        raise ValueError(f"embedding has dim {e2.shape[1]}, encoder expects {params.embed_dim}")
    h1 = np.tanh(e2 @ params["W1"] + params["b1"])
    mu = h1 @ params["Wm"] + params["bm"]
    sigma = np.exp(0.5 * (h1 @ params["Wv"] + params["bv"]))
    if noise is None:
        z = mu.copy()
    else:
        eps = np.atleast_2d(np.asarray(noise, dtype=np.float64))
        if eps.shape != mu.shape:
            raise ValueError(f"noise has shape {eps.shape}, expected {mu.shape}")
        z = mu + sigma * eps
    if squeeze:
        return mu[0], sigma[0], z[0]
    return mu, sigma, z


def kl_standard_normal(mu: np.ndarray, sigma: np.ndarray) -> float:
    """Per-item mean of KL(N(mu, sigma^2) || N(0, I))."""
    mu, sigma = np.atleast_2d(mu), np.atleast_2d(sigma)
    terms = 0.5 * (mu ** 2 + sigma ** 2 - 1.0 - np.log(sigma ** 2))
    return float(terms.sum(axis=1).mean())


def _check(name: str, value: np.ndarray):
    if not np.all(np.isfinite(value)):
        raise TrainingError(f"non-finite value in {name}")


def _onehot(a: np.ndarray, A: int) -> np.ndarray:
    out = np.zeros((a.size, A))
    out[np.arange(a.size), a] = 1.0
    return out


def _forward(params: EncoderParams, batch: Batch, weights: LossWeights):
    P = params.arrays
    n = len(batch)
    e = batch.e
    h1 = np.tanh(e @ P["W1"] + P["b1"])
    mu = h1 @ P["Wm"] + P["bm"]
    lv = h1 @ P["Wv"] + P["bv"]
    sigma = np.exp(0.5 * lv)
    z = mu + sigma * batch.noise
    _check("encoder", z)

    g1 = np.tanh(z @ P["D1"] + P["c1"])
    e_hat = g1 @ P["D2"] + P["c2"]
    recon = float(((e - e_hat) ** 2).sum() / n)
    _check("recon", e_hat)

    xo = np.hstack([z, _onehot(batch.a, params.action_count)])
    k1 = np.tanh(xo @ P["O1"] + P["o1"])
    y_hat = (k1 @ P["O2"] + P["o2"])[:, 0]
    outcome = float(((y_hat - batch.y) ** 2).mean())
    _check("outcome", y_hat)

    kl = float((0.5 * (mu ** 2 + sigma ** 2 - 1.0 - lv)).sum() / n)

    q1h = np.tanh(z @ P["Q1"] + P["q1"])
    logits = q1h @ P["Q2"] + P["q2"]
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    ce = float(-logp[np.arange(n), batch.a].mean())
    _check("mi", logp)

    comps = {"recon": recon, "outcome": outcome, "kl": kl, "mi": -ce}
    total = recon + weights.lam * outcome + weights.beta * kl + weights.alpha * comps["mi"]
    if not math.isfinite(total):
        raise TrainingError("non-finite value in total")
    cache = dict(h1=h1, mu=mu, lv=lv, sigma=sigma, z=z, g1=g1, e_hat=e_hat, xo=xo, k1=k1,
                 y_hat=y_hat, q1h=q1h, p=np.exp(logp))
    return total, comps, cache


def loss(params: EncoderParams, batch: Batch, weights: LossWeights) -> tuple[float, dict[str, float]]:
    total, comps, _ = _forward(params, batch, weights)
    return total, comps


def loss_and_grads(params: EncoderParams, batch: Batch, weights: LossWeights):
    """Total loss, its components, and d(total)/d(param) for every parameter.

    The critic's gradients here are those of the *main* objective (which pushes
    its cross-entropy up); :func:`critic_grads` gives the critic's own update.
    """
    total, comps, c = _forward(params, batch, weights)
    P = params.arrays
    n = len(batch)
    d = params.latent_dim
    G: dict[str, np.ndarray] = {}

    d_ehat = -2.0 * (batch.e - c["e_hat"]) / n
    G["D2"] = c["g1"].T @ d_ehat
    G["c2"] = d_ehat.sum(axis=0)
    d_pre = (d_ehat @ P["D2"].T) * (1.0 - c["g1"] ** 2)
    G["D1"] = c["z"].T @ d_pre
    G["c1"] = d_pre.sum(axis=0)
    dz = d_pre @ P["D1"].T

    d_yhat = (weights.lam * 2.0 * (c["y_hat"] - batch.y) / n)[:, None]
    G["O2"] = c["k1"].T @ d_yhat
    G["o2"] = d_yhat.sum(axis=0)
    d_pre = (d_yhat @ P["O2"].T) * (1.0 - c["k1"] ** 2)
    G["O1"] = c["xo"].T @ d_pre
    G["o1"] = d_pre.sum(axis=0)
    dz += (d_pre @ P["O1"].T)[:, :d]

    # mi = -CE, so d(alpha * mi)/d(logits) = -alpha * (p - onehot) / n
    d_logits = -weights.alpha * (c["p"] - _onehot(batch.a, params.action_count)) / n
    G["Q2"] = c["q1h"].T @ d_logits
    G["q2"] = d_logits.sum(axis=0)
    d_pre = (d_logits @ P["Q2"].T) * (1.0 - c["q1h"] ** 2)
    G["Q1"] = c["z"].T @ d_pre
    G["q1"] = d_pre.sum(axis=0)
    dz += d_pre @ P["Q1"].T

    d_mu = dz + weights.beta * c["mu"] / n
    d_lv = dz * batch.noise * 0.5 * c["sigma"] + weights.beta * 0.5 * (c["sigma"] ** 2 - 1.0) / n
    G["Wm"] = c["h1"].T @ d_mu
    G["bm"] = d_mu.sum(axis=0)
    G["Wv"] = c["h1"].T @ d_lv
    G["bv"] = d_lv.sum(axis=0)
    d_pre = (d_mu @ P["Wm"].T + d_lv @ P["Wv"].T) * (1.0 - c["h1"] ** 2)
    G["W1"] = batch.e.T @ d_pre
    G["b1"] = d_pre.sum(axis=0)
    return total, comps, G


def critic_grads(params: EncoderParams, z: np.ndarray, a: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy of the critic on fixed (detached) latents and its gradients."""
    P = params.arrays
    n = z.shape[0]
    q1h = np.tanh(z @ P["Q1"] + P["q1"])
    logits = q1h @ P["Q2"] + P["q2"]
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    ce = float(-logp[np.arange(n), a].mean())
    d_logits = (np.exp(logp) - _onehot(a, params.action_count)) / n
    d_pre = (d_logits @ P["Q2"].T) * (1.0 - q1h ** 2)
    return ce, {"Q2": q1h.T @ d_logits, "q2": d_logits.sum(axis=0), "Q1": z.T @ d_pre, "q1": d_pre.sum(axis=0)}


def critic_accuracy(params: EncoderParams, z: np.ndarray, a: np.ndarray) -> float:
    P = params.arrays
    logits = np.tanh(z @ P["Q1"] + P["q1"]) @ P["Q2"] + P["q2"]
    return float((logits.argmax(axis=1) == a).mean())


def predict_outcome(params: EncoderParams, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Outcome head prediction on the original outcome scale."""
    P = params.arrays
    xo = np.hstack([np.atleast_2d(z), _onehot(np.asarray(a), params.action_count)])
    y = (np.tanh(xo @ P["O1"] + P["o1"]) @ P["O2"] + P["o2"])[:, 0]
    return y * params.meta.get("y_scale", 1.0) + params.meta.get("y_mean", 0.0)


# --- gradient check -----------------------------------------------------------

def grad_check(params: EncoderParams, batch: Batch, weights: LossWeights, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    _, _, G = loss_and_grads(params, batch, weights)
    probe = params.copy()
    worst = 0.0
    for key in PARAM_KEYS:
        arr = probe.arrays[key]
        flat = arr.reshape(-1)
        g_an = G[key].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up, _ = loss(probe, batch, weights)
            flat[i] = keep - step
            down, _ = loss(probe, batch, weights)
            flat[i] = keep
            g_fd = (up - down) / (2.0 * step)
            err = abs(g_an[i] - g_fd) / max(1.0, abs(g_an[i]), abs(g_fd))
            worst = max(worst, err)
    return worst


# --- training -----------------------------------------------------------------

def _clip_scale(grads: dict[str, np.ndarray], keys, cap: float) -> float:
    if cap <= 0:
        return 1.0
    norm = math.sqrt(sum(float((grads[k] ** 2).sum()) for k in keys))
    return 1.0 if norm <= cap else cap / norm


def train(embeddings: np.ndarray, actions: np.ndarray, outcomes: np.ndarray,
          config: TrainConfig = TrainConfig(), weights: LossWeights = LossWeights(),
          hidden: int = 64, latent_dim: int = 16, action_count: int = 7,
          init: EncoderParams | None = None) -> tuple[EncoderParams, list[dict]]:
    """Alternating critic / main SGD updates; returns params and per-epoch trace.

    Outcomes are standardized with the training mean and SD (kept in
    ``params.meta``) before entering the outcome loss.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    a = np.asarray(actions, dtype=np.int64)
    y = np.asarray(outcomes, dtype=np.float64)
    n = e.shape[0]
    params = init.copy() if init is not None else init_params(
        e.shape[1], hidden, latent_dim, action_count, config.seed)
    y_mean = float(y.mean()) if n else 0.0
    y_scale = float(y.std()) if n > 1 and y.std() > 0 else 1.0
    params.meta.update(y_mean=y_mean, y_scale=y_scale)
    ys = (y - y_mean) / y_scale

    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(13,)))
    main_keys = ENCODER_KEYS + DECODER_KEYS + OUTCOME_KEYS
    trace: list[dict] = []
    d = params.latent_dim
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = dict.fromkeys(("total",) + COMPONENTS, 0.0)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = Batch(e[idx], a[idx], ys[idx], rng.standard_normal((idx.size, d)))
            for _ in range(config.disc_steps):
                _, _, z = encode(params, batch.e, batch.noise)
                _, g = critic_grads(params, z, batch.a)
                scale = _clip_scale(g, CRITIC_KEYS, config.clip_norm)
                for k in CRITIC_KEYS:
                    params.arrays[k] -= config.disc_lr * scale * g[k]
            total, comps, G = loss_and_grads(params, batch, weights)
            scale = _clip_scale(G, main_keys, config.clip_norm)
            for k in main_keys:
                params.arrays[k] -= config.lr * scale * G[k]
            m = idx.size
            sums["total"] += total * m
            for k in COMPONENTS:
                sums[k] += comps[k] * m
        row = {"epoch": epoch, **{k: v / max(n, 1) for k, v in sums.items()}}
        trace.append(row)
        if not math.isfinite(row["total"]) or row["total"] > 1e6:
            raise TrainingError(f"training diverged at epoch {epoch} (total={row['total']:.4g})", trace)
    return params, trace


def embed_dataset(params: EncoderParams, embeddings: np.ndarray, action, outcome, unit, time) -> LatentTable:
    """Inference-mode latents (z = mu), one row per record."""
    mu, _, _ = encode(params, np.atleast_2d(embeddings))
    return LatentTable(mu, action, outcome, unit, time, {"latent": "posterior_mean"})


# --- persistence --------------------------------------------------------------

def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    header = {
        "format": "latentmatch-encoder/1",
        "embed_dim": params.embed_dim, "hidden": params.hidden,
        "latent_dim": params.latent_dim, "action_count": params.action_count,
        "seed": params.seed, "meta": params.meta,
        "layers": [{"name": k, "shape": list(params.arrays[k].shape)} for k in PARAM_KEYS],
    }
    with Path(path).open("wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(params.flat().astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> EncoderParams:
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut])
    data = np.frombuffer(raw[cut + 1:], dtype="<f8")
    arrays, pos = {}, 0
    for layer in header["layers"]:
        size = int(np.prod(layer["shape"]))
        arrays[layer["name"]] = data[pos:pos + size].reshape(layer["shape"]).astype(np.float64)
        pos += size
    if pos != data.size:
        raise ValueError(f"checkpoint {path}: payload has {data.size} values, header describes {pos}")
    return EncoderParams(header["embed_dim"], header["hidden"], header["latent_dim"],
                         header["action_count"], arrays, header["seed"], header.get("meta", {}))


def write_trace(trace: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "total", *COMPONENTS])
        for row in trace:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in ("total",) + COMPONENTS])
