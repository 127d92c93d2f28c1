"""Central finite-difference checks for every differentiable op and the full training loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_TOL = 1e-4
DEFAULT_EPS = 1e-6


@dataclass
class CheckResult:
    name: str
    seeds: int
    max_rel_error: float
    worst_seed: int
    seconds: float
    tol: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def line(self) -> str:
        flag = "ok" if self.passed else "FAIL"
        return f"{self.name:<22}{self.seeds:>6}{self.max_rel_error:>14.3e}{self.seconds:>9.2f}s  {flag}"


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative error; both gradients below ``floor`` count as agreement."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central differences of the scalar ``f`` w.r.t. every entry of ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


# builder(rng) -> (fn taking input tensors, list of input arrays)
Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]


def check_builder(name: str, build: Builder, seeds: int = 20, eps: float = DEFAULT_EPS,
                  tol: float = DEFAULT_TOL) -> CheckResult:
    start = time.perf_counter()
    worst, worst_seed = 0.0, 0
    with T.precision(np.float64):
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            fn, arrays = build(rng)
            inputs = [T.tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
            out = fn(*inputs)
            weight = rng.normal(size=out.shape)
            loss = T.sum(out * T.tensor(weight))
            loss.backward()

            def f():
                with T.no_grad():
                    return float(np.sum(fn(*inputs).data * weight))

            for t in inputs:
                err = rel_error(t.grad if t.grad is not None else np.zeros_like(t.data), numeric_grad(f, t.data, eps))
                if err > worst:
                    worst, worst_seed = err, seed
    return CheckResult(name, seeds, worst, worst_seed, time.perf_counter() - start, tol)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _distinct(rng, shape, gap=1e-2):
    """Values whose pairwise gaps exceed ``gap`` so argmax is stable under eps perturbation."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap * 5 + rng.uniform(0, gap, n)).reshape(shape) / 10


def op_builders() -> dict[str, Builder]:
    b: dict[str, Builder] = {}
    b["add"] = lambda r: (T.add, [r.normal(size=(3, 4)), r.normal(size=(4,))])
    b["sub"] = lambda r: (T.sub, [r.normal(size=(2, 3)), r.normal(size=(2, 1))])
    b["mul"] = lambda r: (T.mul, [r.normal(size=(3, 4)), r.normal(size=(3, 4))])
    b["div"] = lambda r: (T.div, [r.normal(size=(3, 4)), r.uniform(0.5, 2.0, size=(4,))])
    b["neg"] = lambda r: (T.neg, [r.normal(size=(5,))])
    b["exp"] = lambda r: (T.exp, [r.normal(size=(3, 3))])
    b["log"] = lambda r: (T.log, [r.uniform(0.3, 3.0, size=(3, 3))])
    b["sqrt"] = lambda r: (T.sqrt, [r.uniform(0.3, 3.0, size=(6,))])
    b["relu"] = lambda r: (T.relu, [_away_from_zero(r, (4, 5))])
    b["gelu"] = lambda r: (T.gelu, [r.normal(size=(4, 5)) * 2])
    b["masked_fill"] = lambda r: (
        (lambda m: (lambda a: T.masked_fill(a, m, -5.0)))(r.random((3, 4)) < 0.3), [r.normal(size=(3, 4))])
    b["matmul"] = lambda r: (T.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))])
    b["linear"] = lambda r: (T.linear, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 3)), r.normal(size=(3,))])
    b["outer"] = lambda r: (T.outer, [r.normal(size=(4,)), r.normal(size=(3,))])
    b["conv1d"] = lambda r: (T.conv1d, [r.normal(size=(2, 6, 3)), r.normal(size=(5, 3, 2)), r.normal(size=(2,))])
    b["embedding"] = lambda r: (
        (lambda idx: (lambda tab: T.embedding(tab, idx)))(r.integers(0, 5, size=(2, 4))), [r.normal(size=(5, 3))])
    b["concat"] = lambda r: (lambda x, y: T.concat([x, y], axis=1), [r.normal(size=(2, 3)), r.normal(size=(2, 2))])
    b["reshape"] = lambda r: (lambda x: T.reshape(x, (3, 4)), [r.normal(size=(2, 6))])
    b["transpose"] = lambda r: (lambda x: T.transpose(x, (2, 0, 1)), [r.normal(size=(2, 3, 4))])
    b["swapaxes"] = lambda r: (lambda x: T.swapaxes(x, -1, -2), [r.normal(size=(2, 3, 4))])
    b["getitem"] = lambda r: (lambda x: x[:, 1:3], [r.normal(size=(3, 4))])
    b["getitem_fancy"] = lambda r: (
        (lambda idx: (lambda x: x[idx]))(r.integers(0, 4, size=6)), [r.normal(size=(4, 2))])
    b["sum"] = lambda r: (lambda x: T.sum(x, axis=1, keepdims=True), [r.normal(size=(3, 4))])
    b["mean"] = lambda r: (lambda x: T.mean(x, axis=0), [r.normal(size=(3, 4))])
    b["max"] = lambda r: (lambda x: T.max(x, axis=-1), [_distinct(r, (3, 5))])
    b["softmax"] = lambda r: (lambda x: T.softmax(x, axis=-1), [r.normal(size=(3, 5))])
    b["log_softmax"] = lambda r: (lambda x: T.log_softmax(x, axis=-1), [r.normal(size=(3, 5))])
    b["layernorm"] = lambda r: (T.layernorm, [r.normal(size=(3, 6)), r.normal(size=(6,)), r.normal(size=(6,))])
    b["l2_normalize"] = lambda r: (lambda x: T.l2_normalize(x, axis=-1), [r.normal(size=(3, 5))])
    return b


def module_builders() -> dict[str, Builder]:
    """Composite building blocks checked w.r.t. their inputs and parameters."""
    from .nn import MultiHeadAttention, TransformerBlock
    from .qal import assemble_qal, mask_similarity, q2v_attend, similarity_matrix, v2q_attend

    def attention(r):
        mha = MultiHeadAttention(6, 2, r)
        mask = np.ones((2, 5), bool)
        mask[1, 3:] = False
        params = [p for _, p in mha.named_parameters()]

        return (lambda x, *ps: _rebind(mha, ps)(x, mask)), [r.normal(size=(2, 5, 6))] + [p.data.copy() for p in params]

    def block(r):
        blk = TransformerBlock(6, 2, r, ff_mult=2)
        mask = np.ones((1, 4), bool)
        mask[0, 3] = False
        params = [p for _, p in blk.named_parameters()]
        return (lambda x, *ps: _rebind(blk, ps)(x, mask)), [r.normal(size=(1, 4, 6))] + [p.data.copy() for p in params]

    def qal(r):
        H = 4
        clip_mask = np.array([[True, True, True, False, False]])
        tok_mask = np.array([[True, True, False]])

        def fn(gamma, phi, w1, w2, w3):
            w = SimpleNamespace(w1=w1, w2=w2, w3=w3)
            a = mask_similarity(similarity_matrix(gamma, phi, w), clip_mask, tok_mask)
            return assemble_qal(gamma, v2q_attend(a, phi), q2v_attend(a, gamma), clip_mask)
        return fn, [r.normal(size=(1, 5, H)), r.normal(size=(1, 3, H)), r.normal(size=(H,)),
                    r.normal(size=(H,)), r.normal(size=(H,))]

    def netvlad(r):
        from .qdf import NetVLAD
        vlad = NetVLAD(4, 3, r)
        mask = np.array([[True, True, True, False]])
        params = [p for _, p in vlad.named_parameters()]

        def fn(x, *ps):
            m = _rebind(vlad, ps)
            return m.aggregate(x, m.assignments(x, mask))
        return fn, [r.normal(size=(1, 4, 4))] + [p.data.copy() for p in params]

    return {"attention": attention, "transformer_block": block, "qal": qal, "netvlad": netvlad}


def _rebind(module, tensors: Sequence[Tensor]):
    """Point a module's parameters at the given tensors so gradients flow to them."""
    _set_params(module, list(tensors))
    return module


def _set_params(module, tensors: list[Tensor]) -> None:
    from .nn import Module
    seen: set[int] = set()
    names = [n for n, _ in module.named_parameters()]
    lookup = dict(zip(names, tensors))

    def walk(obj, prefix):
        if id(obj) in seen:
            return
        seen.add(id(obj))
        for k, v in vars(obj).items():
            full = f"{prefix}{k}"
            if isinstance(v, Tensor) and full in lookup:
                setattr(obj, k, lookup[full])
            elif isinstance(v, Module):
                walk(v, full + ".")
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Module):
                        walk(item, f"{full}.{i}.")
    walk(module, "")


# ---------------------------------------------------------------- composite loss


def tiny_config(seed: int = 0, vs_head: str = "on"):
    from .config import ModelConfig
    return ModelConfig(hidden=8, max_clips=8, max_tokens=5, visual_dim=6, text_dim=5, n_heads=2, ff_mult=2,
                       n_clusters=3, conv_kernel=3, vs_head=vs_head, model_seed=seed)


def composite_problem(seed: int):
    """A tiny model with one query, a positive and two negative videos, and its loss closure."""
    from .data import QueryInput, VideoBatch
    from .model import Conquer
    from .training import shared_softmax_loss, video_ce_loss

    rng = np.random.default_rng(1000 + seed)
    cfg = tiny_config(seed)
    model = Conquer(cfg).astype(np.float64)
    counts = [6, 8, 5]
    L = cfg.max_clips
    mask = np.arange(L)[None] < np.array(counts)[:, None]
    vis = rng.normal(size=(3, L, cfg.visual_dim)) * mask[..., None]
    txt = rng.normal(size=(3, L, cfg.text_dim)) * mask[..., None]
    videos = VideoBatch(["p", "n1", "n2"], vis, txt, mask, np.array(counts))
    qmask = np.array([[True, True, True, True, False]])
    query = QueryInput(rng.normal(size=(1, 5, cfg.text_dim)) * qmask[..., None], qmask)
    gt = (1, 3)

    def loss_fn() -> Tensor:
        out = model(query, videos)
        moment, _, _ = shared_softmax_loss(out.scores.begin, out.scores.end, gt, videos.mask)
        return moment * 1e-2 + video_ce_loss(out.video_score) * 5e-2

    return model, loss_fn


def check_composite(seeds: int = 20, eps: float = 1e-5, tol: float = DEFAULT_TOL) -> CheckResult:
    """Directional central differences of the full loss, one random direction per parameter tensor."""
    start = time.perf_counter()
    worst, worst_seed = 0.0, 0
    with T.precision(np.float64):
        for seed in range(seeds):
            model, loss_fn = composite_problem(seed)
            loss = loss_fn()
            model.zero_grad()
            loss.backward()
            rng = np.random.default_rng(seed)
            for name, p in model.named_parameters():
                if p.grad is None:
                    raise AssertionError(f"{name} received no gradient")
                d = rng.normal(size=p.shape)
                d /= np.linalg.norm(d)
                analytic = float(np.sum(p.grad * d))
                base = p.data.copy()
                with T.no_grad():
                    p.data = base + eps * d
                    hi = loss_fn().item()
                    p.data = base - eps * d
                    lo = loss_fn().item()
                p.data = base
                numeric = (hi - lo) / (2 * eps)
                err = rel_error(np.array([analytic]), np.array([numeric]), floor=1e-9)
                if err > worst:
                    worst, worst_seed = err, seed
    return CheckResult("composite_loss", seeds, worst, worst_seed, time.perf_counter() - start, tol)


def run_all(seeds: int = 20, tol: float = DEFAULT_TOL, include_composite: bool = True) -> list[CheckResult]:
    results = [check_builder(name, b, seeds, tol=tol) for name, b in op_builders().items()]
    results += [check_builder(name, b, seeds, tol=tol) for name, b in module_builders().items()]
    if include_composite:
        results.append(check_composite(seeds, tol=tol))
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    head = f"{'check':<22}{'seeds':>6}{'max rel err':>14}{'time':>10}"
    lines = [head, "-" * len(head)] + [r.line() for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} passed")
    return "\n".join(lines) + "\n"
