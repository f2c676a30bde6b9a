"""Reference implementations used as test oracles."""

import numpy as np
from hypothesis import strategies as st

from mmvit.config import MMViTConfig
from mmvit.embedding import ViewSpec
from mmvit.tensor import Tensor, default_dtype, no_grad


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_op_grad(fn, *arrays, eps: float = 1e-6, seed: int = 0) -> float:
    """Largest relative error between backward and finite differences of ``sum(fn(*xs) * R)``."""
    with default_dtype(np.float64):
        xs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = fn(*xs)
        r = np.random.default_rng(seed).standard_normal(out.shape)
        loss = (out * Tensor(r)).sum()
        loss.backward()
        worst = 0.0
        for x in xs:

            def f():
                with no_grad():
                    return float((fn(*[Tensor(y.data) for y in xs]).data * r).sum())

            num = numeric_grad(f, x.data, eps)
            ana = x.grad.data if x.grad is not None else np.zeros_like(x.data)
            worst = max(worst, rel_err(ana, num))
        return worst


def naive_conv2d(x, w, b, stride, padding, groups=1):
    """Six nested loops (plus channel group bookkeeping)."""
    c_in, h, wd = x.shape
    c_out, cpg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.zeros((c_in, h + 2 * ph, wd + 2 * pw))
    xp[:, ph:ph + h, pw:pw + wd] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((c_out, ho, wo))
    opg = c_out // groups
    for o in range(c_out):
        g = o // opg
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else b[o]
                for c in range(cpg):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[g * cpg + c, i * sh + u, j * sw + v] * w[o, c, u, v]
                out[o, i, j] = acc
    return out


def brute_attention(q, k, v, scale):
    """Loops over queries and keys: ``softmax(q k^T * scale) v`` for 2-D arrays."""
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        logits = np.array([scale * float(np.dot(q[i], k[j])) for j in range(k.shape[0])])
        weights = np.exp(logits - logits.max())
        weights /= weights.sum()
        for j in range(k.shape[0]):
            out[i] += weights[j] * v[j]
    return out


def brute_average_precision(scores, labels) -> float:
    """Precision at every prefix of the ranking that ends on a positive, averaged."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    precisions = []
    for k in range(1, n + 1):
        if labels[order[k - 1]]:
            hits = sum(1 for i in order[:k] if labels[i])
            precisions.append(hits / k)
    return sum(precisions) / len(precisions) if precisions else float("nan")


def model_gradcheck(model, x: np.ndarray, eps: float = 1e-4, coords: int = 2, seed: int = 0) -> dict:
    """Finite-difference check of every parameter of a float64 ``model``.

    The loss is a fixed random projection of the logits. Per parameter tensor
    one random direction plus ``coords`` single coordinates are perturbed.
    Returns ``{name: (relative error, analytic norm)}``; parameters that got
    no gradient report the finite-difference magnitude instead.
    """
    rng = np.random.default_rng(seed)
    model.eval()
    logits = model(Tensor(x))
    r = rng.standard_normal(logits.shape)
    model.zero_grad()
    (logits * Tensor(r)).sum().backward()

    def loss():
        with no_grad():
            return float((model(Tensor(x)).data * r).sum())

    results = {}
    for name, p in model.named_parameters():
        grad = None if p.grad is None else p.grad.data
        probes = [rng.standard_normal(p.shape)]
        for flat in rng.choice(p.size, size=min(coords, p.size), replace=False):
            e = np.zeros(p.size)
            e[flat] = 1.0
            probes.append(e.reshape(p.shape))
        worst = 0.0
        for u in probes:
            base = p.data.copy()
            p.data = base + eps * u
            hi = loss()
            p.data = base - eps * u
            lo = loss()
            p.data = base
            num = (hi - lo) / (2 * eps)
            if grad is None:
                worst = max(worst, abs(num))
                continue
            ana = float((grad * u).sum())
            scale = max(abs(ana), abs(num), 1e-7)
            worst = max(worst, abs(ana - num) / scale)
        results[name] = (worst, None if grad is None else float(np.linalg.norm(grad)))
    return results


@st.composite
def small_configs(draw):
    """Random valid two-view configurations, 1-3 stages, inputs up to 32 pixels a side."""
    stages = draw(st.integers(1, 3))
    s1 = draw(st.sampled_from([1, 2]))
    k1 = draw(st.integers(s1 + 1, s1 + 3).filter(lambda k: s1 > 1 or k % 2))
    k2 = draw(st.integers(2 * s1 + 1, 2 * s1 + 4))
    need = 2 * s1 * 2 ** (stages - 1)
    h = need * draw(st.integers(1, 2))
    w = need * draw(st.integers(1, 2))
    dim = draw(st.sampled_from([4, 8]))
    counts = tuple(draw(st.integers(0, 1)) for _ in range(stages))
    heads = tuple(draw(st.sampled_from([1, 2])) for _ in range(stages))
    return MMViTConfig(
        input=(1, h, w),
        views=(ViewSpec((k1, k1), (s1, s1)), ViewSpec((k2, k2), (2 * s1, 2 * s1))),
        embed_dim=dim,
        stage_self_counts=counts,
        heads=heads,
        num_classes=3,
    )


def check_scale_invariants(cfg) -> int:
    """Walk a random input through every block of ``MMViT(cfg)`` asserting the
    token/channel bookkeeping. Returns the number of layers checked."""
    from mmvit.attention import BlockKind
    from mmvit.model import MMViT

    model = MMViT(cfg)
    x = Tensor(np.random.default_rng(0).standard_normal((1,) + cfg.input).astype(np.float32))
    with no_grad():
        views = model.embed(x)
        for plan, block in zip(model.schedule, model.blocks):
            before_counts, before_ch = views.spatial_counts(), views.channels()
            views = block(views)
            after_counts, after_ch = views.spatial_counts(), views.channels()
            for t, grid, cls in zip(views.tokens, views.grids, views.has_cls):
                assert t.shape[1] == grid[0] * grid[1] + cls
            assert after_counts[0] == 4 * after_counts[1]
            if plan.kind is BlockKind.SCALED:
                assert [4 * a for a in after_counts] == before_counts
                assert [2 * c for c in before_ch] == after_ch
            else:
                assert before_counts == after_counts and before_ch == after_ch
        assert model(x).shape == (1, cfg.num_classes)
    return len(model.blocks)
