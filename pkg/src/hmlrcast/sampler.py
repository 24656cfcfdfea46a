"""No-U-Turn Hamiltonian Monte Carlo with windowed warmup adaptation.

Trajectories use multinomial sampling of states (biased progressive sampling
between subtrees) and the momentum-sum U-turn criterion, including checks
across merged subtrees.  Warmup adapts the step size by dual averaging and a
diagonal inverse mass matrix from windowed variance estimates.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

Target = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 1
    warmup: int = 7000
    total: int = 15000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0
    init_buffer: int = 75
    term_buffer: int = 50
    base_window: int = 25
    max_delta_h: float = 1000.0

    def __post_init__(self):
        if not 0 <= self.warmup < self.total:
            raise ValueError(f"need 0 <= warmup < total, got {self.warmup}, {self.total}")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.chains < 1 or self.max_tree_depth < 1:
            raise ValueError("chains and max_tree_depth must be positive")

    @property
    def n_draws(self) -> int:
        return self.total - self.warmup

    def replace(self, **kw) -> "SamplerConfig":
        return SamplerConfig(**{**asdict(self), **kw})


@dataclass(frozen=True, eq=False)
class Draws:
    samples: np.ndarray  # (n, dim) unconstrained
    log_post: np.ndarray
    divergent: np.ndarray
    tree_depth: np.ndarray
    accept_stat: np.ndarray
    n_leapfrog: np.ndarray
    chain: np.ndarray
    step_size: np.ndarray  # per chain, post-warmup
    inv_metric: np.ndarray  # (chains, dim), post-warmup
    config: SamplerConfig = field(default_factory=SamplerConfig)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    _DIAG = ("log_post", "divergent", "tree_depth", "accept_stat", "n_leapfrog", "chain")

    def save(self, stem: str | Path, header: dict | None = None) -> list[Path]:
        """Write ``<stem>.samples.npy``, ``<stem>.diag.npy`` and a ``<stem>.json`` header."""
        paths = _artifact_paths(stem)
        np.save(paths[0], np.ascontiguousarray(self.samples), allow_pickle=False)
        diag = np.column_stack([np.asarray(getattr(self, k), dtype=float) for k in self._DIAG])
        np.save(paths[1], diag, allow_pickle=False)
        doc = {
            "config": asdict(self.config),
            "step_size": self.step_size.tolist(),
            "inv_metric": self.inv_metric.tolist(),
            "diagnostic_columns": list(self._DIAG),
            "summary": diagnostics_summary(self),
            **(header or {}),
        }
        paths[2].write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return paths

    @classmethod
    def load(cls, stem: str | Path) -> tuple["Draws", dict]:
        samples_path, diag_path, header_path = _artifact_paths(stem)
        samples = np.load(samples_path)
        diag = np.load(diag_path)
        doc = json.loads(header_path.read_text())
        cols = {k: diag[:, i] for i, k in enumerate(doc["diagnostic_columns"])}
        draws = cls(
            samples, cols["log_post"], cols["divergent"].astype(bool), cols["tree_depth"].astype(int),
            cols["accept_stat"], cols["n_leapfrog"].astype(int), cols["chain"].astype(int),
            np.asarray(doc["step_size"]), np.asarray(doc["inv_metric"]), SamplerConfig(**doc["config"]),
        )
        return draws, doc


def _artifact_paths(stem) -> list[Path]:
    stem = Path(stem)
    return [stem.parent / (stem.name + ext) for ext in (".samples.npy", ".diag.npy", ".json")]


# --------------------------------------------------------------------------
# adaptation helpers
# --------------------------------------------------------------------------

class _DualAveraging:
    gamma, t0, kappa = 0.05, 10.0, 0.75

    def __init__(self, delta: float):
        self.delta = delta
        self.restart(1.0)

    def restart(self, eps: float):
        self.mu = math.log(10.0 * eps)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept: float) -> float:
        self.counter += 1
        accept = min(1.0, accept)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        w = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - w) * self.x_bar + w * x
        return math.exp(x)

    def final(self) -> float:
        return math.exp(self.x_bar)


class _Windows:
    """Windowed variance-adaptation schedule (fast / doubling slow windows / fast)."""

    def __init__(self, warmup: int, init_buffer: int, term_buffer: int, base_window: int):
        self.warmup = warmup
        if warmup < 20:
            self.active = False
            return
        self.active = True
        if init_buffer + base_window + term_buffer > warmup:
            init_buffer = int(0.15 * warmup)
            term_buffer = int(0.1 * warmup)
            base_window = warmup - (init_buffer + term_buffer)
        self.init_buffer, self.term_buffer = init_buffer, term_buffer
        self.window_size = base_window
        self.next_end = init_buffer + base_window - 1
        self.counter = 0

    def in_window(self) -> bool:
        return (self.active and self.counter >= self.init_buffer
                and self.counter < self.warmup - self.term_buffer)

    def window_closes(self) -> bool:
        return self.active and self.counter == self.next_end and self.counter != self.warmup

    def advance(self):
        last = self.warmup - self.term_buffer - 1
        if self.next_end != last:
            self.window_size *= 2
            self.next_end = self.counter + self.window_size
            if self.next_end != last and self.next_end + 2 * self.window_size >= self.warmup - self.term_buffer:
                self.next_end = last


class _Welford:
    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def variance(self) -> np.ndarray:
        return self.m2 / (self.n - 1)


# --------------------------------------------------------------------------
# NUTS transition
# --------------------------------------------------------------------------

def _criterion(p_sharp_minus, p_sharp_plus, rho) -> bool:
    return float(p_sharp_plus @ rho) > 0.0 and float(p_sharp_minus @ rho) > 0.0


class _Subtree:
    __slots__ = ("valid", "q", "p", "g", "lp", "prop", "log_w", "rho",
                 "ps_beg", "ps_end", "p_beg", "p_end")


class _Chain:
    def __init__(self, target: Target, dim: int, config: SamplerConfig, rng: np.random.Generator):
        self.target = target
        self.dim = dim
        self.config = config
        self.rng = rng
        self.inv_metric = np.ones(dim)
        self.eps = 1.0

    # one leapfrog step
    def _leapfrog(self, q, p, g, eps):
        p = p + 0.5 * eps * g
        q = q + eps * self.inv_metric * p
        lp, g = self.target(q)
        p = p + 0.5 * eps * g
        return q, p, g, lp

    def _hamiltonian(self, lp, p) -> float:
        h = -lp + 0.5 * float(p @ (self.inv_metric * p))
        return h if np.isfinite(h) else math.inf

    def _draw_momentum(self):
        return self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)

    def find_step_size(self, q, lp, g):
        """Double or halve the step size until one leapfrog step crosses acceptance 0.8."""
        direction = 0
        eps = self.eps
        for _ in range(200):
            p = self._draw_momentum()
            h0 = self._hamiltonian(lp, p)
            _, p1, _, lp1 = self._leapfrog(q, p, g, eps)
            delta = h0 - self._hamiltonian(lp1, p1)
            if direction == 0:
                direction = 1 if delta > math.log(0.8) else -1
            if direction == 1 and not delta > math.log(0.8):
                break
            if direction == -1 and not delta < math.log(0.8):
                break
            eps = eps * 2.0 if direction == 1 else eps / 2.0
            if eps > 1e7 or eps < 1e-300:
                raise SamplerError("step size search diverged; posterior may be improper")
        self.eps = eps
        return eps

    def _build(self, depth, q, p, g, lp, direction, h0) -> _Subtree:
        t = _Subtree()
        if depth == 0:
            q, p, g, lp = self._leapfrog(q, p, g, direction * self.eps)
            self.n_leapfrog += 1
            h = self._hamiltonian(lp, p)
            if h - h0 > self.config.max_delta_h:
                self.divergent = True
            log_w = h0 - h
            self.sum_metro += 1.0 if log_w > 0 else math.exp(log_w)
            ps = self.inv_metric * p
            t.valid = not self.divergent
            t.q, t.p, t.g, t.lp = q, p, g, lp
            t.prop = (q, g, lp)
            t.log_w = log_w
            t.rho = p
            t.ps_beg = t.ps_end = ps
            t.p_beg = t.p_end = p
            return t
        a = self._build(depth - 1, q, p, g, lp, direction, h0)
        if not a.valid:
            return a
        b = self._build(depth - 1, a.q, a.p, a.g, a.lp, direction, h0)
        if not b.valid:
            return b
        t.q, t.p, t.g, t.lp = b.q, b.p, b.g, b.lp
        t.log_w = np.logaddexp(a.log_w, b.log_w)
        t.prop = b.prop if self.rng.random() < math.exp(b.log_w - t.log_w) else a.prop
        t.rho = a.rho + b.rho
        valid = _criterion(a.ps_beg, b.ps_end, t.rho)
        valid = valid and _criterion(a.ps_beg, b.ps_beg, a.rho + b.p_beg)
        valid = valid and _criterion(a.ps_end, b.ps_end, b.rho + a.p_end)
        t.valid = valid
        t.ps_beg, t.ps_end = a.ps_beg, b.ps_end
        t.p_beg, t.p_end = a.p_beg, b.p_end
        return t

    def transition(self, q, lp, g):
        self.n_leapfrog = 0
        self.sum_metro = 0.0
        self.divergent = False
        p0 = self._draw_momentum()
        h0 = self._hamiltonian(lp, p0)
        ps0 = self.inv_metric * p0
        fwd = (q, p0, g, lp)
        bck = (q, p0, g, lp)
        # momenta and sharp momenta at the four ends of the back/forward parts
        ps_bb = ps_bf = ps_fb = ps_ff = ps0
        p_bb = p_bf = p_fb = p_ff = p0
        rho = p0.copy()
        rho_f = rho_b = None
        log_sum_w = 0.0
        sample = (q, g, lp)
        depth = 0
        while depth < self.config.max_tree_depth:
            if self.rng.random() > 0.5:
                rho_b, p_bf, ps_bf = rho, p_ff, ps_ff
                t = self._build(depth, *fwd, 1, h0)
                fwd = (t.q, t.p, t.g, t.lp) if t.valid else fwd
                rho_f, ps_fb, ps_ff, p_fb, p_ff = t.rho, t.ps_beg, t.ps_end, t.p_beg, t.p_end
            else:
                rho_f, p_fb, ps_fb = rho, p_bb, ps_bb
                t = self._build(depth, *bck, -1, h0)
                bck = (t.q, t.p, t.g, t.lp) if t.valid else bck
                rho_b, ps_bf, ps_bb, p_bf, p_bb = t.rho, t.ps_beg, t.ps_end, t.p_beg, t.p_end
            if not t.valid:
                break
            depth += 1
            if t.log_w > log_sum_w or self.rng.random() < math.exp(t.log_w - log_sum_w):
                sample = t.prop
            log_sum_w = np.logaddexp(log_sum_w, t.log_w)
            rho = rho_b + rho_f
            persist = _criterion(ps_bb, ps_ff, rho)
            persist = persist and _criterion(ps_bb, ps_fb, rho_b + p_fb)
            persist = persist and _criterion(ps_bf, ps_ff, rho_f + p_bf)
            if not persist:
                break
        accept = self.sum_metro / max(self.n_leapfrog, 1)
        return sample, accept, depth, self.n_leapfrog, self.divergent

    def run(self, q0: np.ndarray):
        cfg = self.config
        lp, g = self.target(q0)
        if not np.isfinite(lp):
            raise SamplerError("target is not finite at the initial point")
        q = q0
        self.find_step_size(q, lp, g)
        da = _DualAveraging(cfg.target_accept)
        da.restart(self.eps)
        windows = _Windows(cfg.warmup, cfg.init_buffer, cfg.term_buffer, cfg.base_window)
        welford = _Welford(self.dim)

        n = cfg.n_draws
        out_q = np.empty((n, self.dim))
        out = {k: np.empty(n) for k in ("lp", "accept", "depth", "nleap", "div")}
        for it in range(cfg.total):
            (q, g, lp), accept, depth, nleap, div = self.transition(q, lp, g)
            if it < cfg.warmup:
                self.eps = da.update(accept)
                if windows.active:
                    if windows.in_window():
                        welford.add(q)
                    if windows.window_closes():
                        windows.advance()
                        var = welford.variance()
                        m = welford.n
                        self.inv_metric = (m / (m + 5.0)) * var + 1e-3 * (5.0 / (m + 5.0))
                        welford = _Welford(self.dim)
                        self.find_step_size(q, lp, g)
                        da.restart(self.eps)
                    windows.counter += 1
                if it == cfg.warmup - 1:
                    self.eps = da.final()
                continue
            i = it - cfg.warmup
            out_q[i] = q
            out["lp"][i], out["accept"][i], out["depth"][i] = lp, accept, depth
            out["nleap"][i], out["div"][i] = nleap, div
        return out_q, out


def _random_init(target: Target, dim: int, rng: np.random.Generator, attempts: int = 100) -> np.ndarray:
    for _ in range(attempts):
        q = rng.uniform(-2.0, 2.0, dim)
        lp, g = target(q)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return q
    raise SamplerError(f"no finite initial point after {attempts} attempts")


def sample(target: Target, dim: int, config: SamplerConfig | None = None, init="random") -> Draws:
    """Run ``config.chains`` NUTS chains on ``target`` and return retained draws.

    ``target(q)`` returns ``(log_density, gradient)``.  ``init`` is ``"random"``
    (uniform on [-2, 2] per coordinate), one point, or one point per chain.
    The result depends only on the arguments: per-chain generators are spawned
    from ``config.seed``.
    """
    config = config or SamplerConfig()
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    parts = []
    for c, ss in enumerate(seeds):
        rng = np.random.Generator(np.random.PCG64(ss))
        if isinstance(init, str):
            if init != "random":
                raise ValueError(f"unknown init {init!r}")
            q0 = _random_init(target, dim, rng)
        elif callable(init):
            q0 = np.asarray(init(rng), dtype=float)
        else:
            q0 = np.asarray(init, dtype=float)
            if q0.ndim == 2:
                q0 = q0[c]
        if q0.shape != (dim,):
            raise ValueError(f"initial point has shape {q0.shape}, expected ({dim},)")
        chain = _Chain(target, dim, config, rng)
        qs, out = chain.run(q0.copy())
        parts.append((qs, out, chain.eps, chain.inv_metric.copy()))
        log.debug("chain %d: step size %.3g, divergences %d", c, chain.eps, int(out["div"].sum()))

    cat = lambda key: np.concatenate([o[key] for _, o, _, _ in parts])  # noqa: E731
    return Draws(
        samples=np.concatenate([qs for qs, _, _, _ in parts]),
        log_post=cat("lp"),
        divergent=cat("div").astype(bool),
        tree_depth=cat("depth").astype(int),
        accept_stat=cat("accept"),
        n_leapfrog=cat("nleap").astype(int),
        chain=np.concatenate([np.full(config.n_draws, c) for c in range(config.chains)]),
        step_size=np.array([eps for *_, eps, _ in parts]),
        inv_metric=np.array([m for *_, m in parts]),
        config=config,
    )


def initialize(spec, L: int, V: int, target: Target, rng: np.random.Generator, attempts: int = 100) -> np.ndarray:
    """Model-aware starting point.

    Coefficients and means are uniform on [-2, 2], log-variances uniform on
    [-1, 1] and correlation blocks exactly 0.  Redraws until the log-posterior
    is finite.
    """
    from .model.transform import layout

    lay = layout(spec, L, V)
    for _ in range(attempts):
        u = np.zeros(lay.dim)
        u[lay.gamma] = rng.uniform(-2.0, 2.0, lay.gamma.stop - lay.gamma.start)
        u[lay.mu] = rng.uniform(-2.0, 2.0, lay.mu.stop - lay.mu.start)
        u[lay.log_sigma2] = rng.uniform(-1.0, 1.0, lay.log_sigma2.stop - lay.log_sigma2.start)
        lp, g = target(u)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return u
    raise SamplerError(
        f"could not find a finite initial point for {spec} after {attempts} attempts "
        f"(L={L}, V={V}, last log-posterior {lp})"
    )


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------

def _autocov(x: np.ndarray) -> np.ndarray:
    n = len(x)
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    ac = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return ac


def _ess_geyer(chains: np.ndarray) -> float:
    """ESS of a (m, n) array via Geyer's initial monotone sequence."""
    m, n = chains.shape
    acov = np.array([_autocov(c) for c in chains])
    chain_var = acov[:, 0] * n / (n - 1)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return float("nan")
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total = 0.0
    prev = math.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        t += 2
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / math.log10(m * n)) if m * n > 1 else tau
    return float(m * n / tau)


def ess_bulk(x: np.ndarray) -> float:
    """Rank-normalized split-chain effective sample size of one trace."""
    from scipy.stats import norm, rankdata

    x = np.asarray(x, dtype=float)
    n = len(x) // 2 * 2
    if n < 4 or np.ptp(x) == 0:
        return float("nan")
    split = x[:n].reshape(2, n // 2)
    r = rankdata(split, method="average").reshape(split.shape)
    z = norm.ppf((r - 3.0 / 8.0) / (split.size + 0.25))
    return _ess_geyer(z)


def ess(x: np.ndarray) -> float:
    """Single-chain effective sample size (no rank normalization, no splitting)."""
    x = np.asarray(x, dtype=float)
    if len(x) < 4 or np.ptp(x) == 0:
        return float("nan")
    return _ess_geyer(x[None, :])


def diagnostics_summary(draws: Draws) -> dict:
    if len(draws) == 0:
        raise ValueError("no draws")
    bulk = ess_bulk(draws.log_post)
    return {
        "n_draws": int(len(draws)),
        "divergences": int(np.sum(draws.divergent)),
        "mean_accept_stat": float(np.mean(draws.accept_stat)),
        "tree_depth_saturation": float(np.mean(draws.tree_depth >= draws.config.max_tree_depth)),
        "mean_leapfrog_steps": float(np.mean(draws.n_leapfrog)),
        "ess_bulk_log_post": None if math.isnan(bulk) else bulk,
        "ess_degenerate": bool(math.isnan(bulk)),
        "step_size": [float(e) for e in draws.step_size],
    }
