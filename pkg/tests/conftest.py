import numpy as np
import pytest

from gasmil.bagio import GroupLayout, SplitSpec, synth_generate
from gasmil.model import GasMil, GasMilConfig, _sub, gfeb_attention, gfeb_mlp
from gasmil.numerics import make_rng
from gasmil.training import loss_and_grad


def tiny_config(rng, K, c, gfeb_kind, loss_kind, s=1, **kw):
    dims = [int(d) for d in rng.integers(3, 9, size=K)]
    return GasMilConfig(
        GroupLayout.from_dims(dims),
        c,
        s=s,
        gfeb_kind=gfeb_kind,
        mlp_hidden=5,
        attn_feature_dim=6,
        attn_dim=4,
        head_hidden=7,
        loss_kind=loss_kind,
        **kw,
    )


def gfeb_outputs(model, params, x):
    """B_k for every block of a single bag, recomputed outside the model."""
    values = params.values()
    fn = gfeb_mlp if model.config.gfeb_kind == "mlp" else gfeb_attention
    return [fn(a, _sub(values, f"gfeb{k}")) for k, a in enumerate(model._block_inputs(x))]


def selection_margin(model, params, x):
    """Smallest gap that decides which entries Max-Min picks, and in what order.

    Looks at the top ``s + 1`` and bottom ``s + 1`` sorted values of every
    column (fewer when ``n < 2s + 2``); ties show up as 0.
    """
    s = model.config.s
    worst = np.inf
    for b in gfeb_outputs(model, params, x):
        srt = np.sort(b, axis=0)
        n = srt.shape[0]
        k = min(s + 1, n)
        worst = min(worst, float(np.diff(srt[n - k :], axis=0).min()), float(np.diff(srt[:k], axis=0).min()))
    return worst


def loss_closure(model, params, labels, dropout_seed=None):
    """``loss_fn`` for finite_diff_check over all parameters plus the input."""
    cfg = model.config

    def loss_fn(arrays):
        rng = make_rng(dropout_seed) if dropout_seed is not None else None
        scores, trace = model.forward(arrays["input"], params, training=rng is not None, rng=rng)
        loss, dscores = loss_and_grad(scores, labels, cfg.loss_kind, cfg.num_classes)
        return loss, model.backward(trace, dscores, need_input=True)

    return loss_fn


def tie_free_case(seed, gfeb_kind, loss_kind, K=None, c=None, min_margin=2e-4):
    """Random tiny model, params and batch whose Max-Min selection is not near a tie."""
    rng = make_rng(seed)
    for _ in range(100):
        k = int(rng.integers(1, 4)) if K is None else K
        cc = int(rng.integers(2, 4)) if c is None else c
        cfg = tiny_config(rng, k, cc, gfeb_kind, loss_kind)
        model = GasMil(cfg)
        params = model.init_params(rng)
        n = int(rng.integers(4, 13))
        x = rng.standard_normal((2, n, cfg.layout.total_width))
        labels = rng.integers(0, cc, size=2)
        if min(selection_margin(model, params, xi) for xi in x) > min_margin:
            return model, params, x, labels
    raise RuntimeError("could not draw a tie-free configuration")


def synth_manifest(tmp, seed, dims=(16, 24), classes=3, bags=500, n=50, plan=None, config=None):
    kw = {} if config is None else {"config": config}
    return synth_generate(
        tmp, GroupLayout.from_dims(list(dims)), bags, n, classes, plan, make_rng(seed),
        split=SplitSpec(seed=seed), **kw,
    )


@pytest.fixture
def rng():
    return make_rng(1234)


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE = []


def record_acceptance(number, title, passed, detail):
    line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
