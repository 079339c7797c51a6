import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bss import bifpn
from bss.errors import ConfigError, GraphError, ShapeError
from bss.io import write_bst

FIX = Path(bifpn.__file__).parent / "fixtures"


def up(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def down(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def silu(x):
    return x / (1 + np.exp(-x))


def fuse(parts, w, eps=1e-4):
    w = np.maximum(0, np.asarray(w, float))
    return sum(wi * p for wi, p in zip(w, parts)) / (eps + w.sum())


def test_scalar_example():
    y = bifpn.fuse_weighted([np.full((1, 1, 1, 1), v) for v in (1.0, 2.0, 3.0)], [0.5, 1.5, 2.0], 1e-4)
    assert y.item() == pytest.approx(9.5 / 4.0001, rel=1e-12)
    assert round(y.item(), 6) == 2.374941


def test_clamping_and_zero_weight_is_deletion(rng):
    a, b, c = rng.standard_normal((3, 1, 2, 3, 3))
    full = bifpn.fuse_weighted([a, b, c], [1.0, 0.0, 2.0])
    np.testing.assert_array_equal(full, bifpn.fuse_weighted([a, c], [1.0, 2.0]))
    np.testing.assert_array_equal(bifpn.fuse_weighted([a, b], [1.0, -5.0]), bifpn.fuse_weighted([a, b], [1.0, 0.0]))


def test_fusion_errors():
    with pytest.raises(ConfigError):
        bifpn.fuse_weighted([], [])
    with pytest.raises(ConfigError):
        bifpn.fuse_weighted([np.zeros((1, 1, 2, 2))], [1.0, 2.0])
    with pytest.raises(ShapeError):
        bifpn.fuse_weighted([np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 4, 4))], [1.0, 1.0])
    with pytest.raises(ConfigError):
        bifpn.fusion_coefficients([0.0, -1.0], 0.0)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_fusion_properties(seed, k):
    rng = np.random.default_rng(seed)
    ins = list(rng.standard_normal((k, 1, 2, 3, 3)))
    w = rng.uniform(0.01, 5.0, k)
    eps = float(rng.choice([0.0, 1e-4, 1e-2]))
    keys = [f"e{i}" for i in range(k)]
    y = bifpn.fuse_weighted(ins, w, eps, keys=keys)
    perm = rng.permutation(k)
    yp = bifpn.fuse_weighted([ins[i] for i in perm], w[perm], eps, keys=[keys[i] for i in perm])
    assert y.tobytes() == yp.tobytes()
    coef = bifpn.fusion_coefficients(w, eps)
    assert np.all(coef >= 0) and coef.sum() <= 1 + 1e-15
    lo, hi = np.min(ins, axis=0), np.max(ins, axis=0)
    s = coef.sum()
    assert np.all(y <= np.maximum(s * hi, hi) + 1e-12) and np.all(y >= np.minimum(s * lo, lo) - 1e-12)
    if eps == 0:
        np.testing.assert_allclose(bifpn.fuse_weighted(ins, 7.0 * w, 0.0), y, rtol=1e-12, atol=1e-14)


def test_symmetric_pair(rng):
    x = rng.standard_normal((1, 3, 2, 2))
    y = bifpn.fuse_weighted([x, x], [1, 1], 1e-4)
    np.testing.assert_allclose(y, (2 / 2.0001) * x, rtol=1e-12)


def test_backward_matches_finite_differences(rng):
    from bss.gradcheck import numeric_grad, relative_error

    ins = list(rng.standard_normal((3, 1, 2, 2, 2)))
    w = np.array([0.5, 1.5, -0.3])
    u = rng.standard_normal(ins[0].shape)
    d_in, d_w = bifpn.fuse_weighted_backward(ins, w, 1e-4, u)
    num = numeric_grad(lambda v: float((u * bifpn.fuse_weighted(ins, v, 1e-4)).sum()), w)
    assert relative_error(d_w[:2], num[:2]).max() <= 1e-6
    assert d_w[2] == 0
    coef = bifpn.fusion_coefficients(w, 1e-4)
    for c, d in zip(coef, d_in):
        np.testing.assert_allclose(d, c * u)


def test_default_neck_validates():
    g = bifpn.default_neck()
    rep = bifpn.graph_validate(g)
    assert rep.ok, str(rep)
    assert rep.dims["P3out"] == (1, 16, 32, 32)
    assert rep.dims["P5out"][2] * 4 == rep.dims["P3out"][2]
    assert rep.order == bifpn.topological_order(g)


def _graph_json(nodes, inputs=None, outputs=None):
    return {"inputs": inputs or {"P3": [1, 2, 4, 4], "P4": [1, 2, 2, 2]},
            "nodes": nodes, "outputs": outputs or [n["id"] for n in nodes if n.get("kind") == "output"]}


IN = [{"id": "P3", "kind": "input"}, {"id": "P4", "kind": "input"}]


def test_validate_collects_errors():
    bad = _graph_json(IN + [
        {"id": "A", "kind": "fuse", "level": "P3", "inputs": [{"src": "A"}], "weights": [1.0]},
        {"id": "B", "kind": "output", "level": "P3", "inputs": [{"src": "P3"}, {"src": "ghost"}], "weights": [1.0]},
    ])
    rep = bifpn.graph_validate(bifpn.graph_from_json(bad))
    text = str(rep)
    assert not rep.ok
    assert "self-loop" in text and "ghost" in text and "1 weights for 2 edges" in text


def test_validate_cycle_and_dims():
    cyc = _graph_json(IN + [
        {"id": "A", "kind": "fuse", "level": "P3", "inputs": [{"src": "B"}, {"src": "P3"}], "weights": [1, 1]},
        {"id": "B", "kind": "output", "level": "P3", "inputs": [{"src": "A"}], "weights": [1]},
    ])
    rep = bifpn.graph_validate(bifpn.graph_from_json(cyc))
    assert not rep.ok and "cycle" in str(rep)
    mismatch = _graph_json(IN + [
        {"id": "O", "kind": "output", "level": "P3", "inputs": [{"src": "P4"}, {"src": "P3"}], "weights": [1, 1]},
    ])
    rep = bifpn.graph_validate(bifpn.graph_from_json(mismatch))
    assert not rep.ok and "dims" in str(rep)
    with pytest.raises(GraphError):
        bifpn.graph_execute(bifpn.graph_from_json(mismatch), {})


def seven_node():
    return bifpn.graph_from_json(_graph_json(IN + [
        {"id": "P4pass", "kind": "fuse", "level": "P4", "inputs": [{"src": "P4"}], "weights": [1.0],
         "epsilon": 0.0},
        {"id": "P4act", "kind": "fuse", "level": "P4", "inputs": [{"src": "P4pass"}], "weights": [1.0],
         "post": {"conv": None, "act": "silu"}},
        {"id": "P3pass", "kind": "fuse", "level": "P3", "inputs": [{"src": "P4act", "resample": "up2"}], "weights": [2.0],
         "epsilon": 0.0},
        {"id": "P3out", "kind": "output", "level": "P3",
         "inputs": [{"src": "P3pass"}, {"src": "P3"}], "weights": [1.0, 1.0]},
        {"id": "P4out", "kind": "output", "level": "P4",
         "inputs": [{"src": "P3out", "resample": "down2"}, {"src": "P4act"}], "weights": [1.0, 1.0]},
    ]))


def test_simplify_seven_node_graph():
    g = seven_node()
    s = bifpn.graph_simplify(g)
    assert sorted(s.nodes) == ["P3", "P3out", "P4", "P4act", "P4out"]
    assert [e.src for e in s.nodes["P4act"].edges] == ["P4"]
    assert s.nodes["P3out"].edges[0] == bifpn.Edge("P4act", ("up2",))
    # P4out gains a skip edge from P4, P3out already had one from P3
    assert [e.src for e in s.nodes["P4out"].edges] == ["P3out", "P4act", "P4"]
    assert len(s.nodes["P3out"].edges) == 2
    assert bifpn.graph_validate(s).ok
    assert bifpn.graph_to_json(bifpn.graph_simplify(s)) == bifpn.graph_to_json(s)
    assert sorted(g.nodes) != sorted(s.nodes)  # input graph untouched


def test_simplify_composes_resample_chain():
    g = bifpn.graph_from_json(_graph_json(IN + [
        {"id": "U", "kind": "fuse", "level": "P3", "inputs": [{"src": "P3", "resample": "up2"}], "weights": [1]},
        {"id": "O", "kind": "output", "level": "P3",
         "inputs": [{"src": "U", "resample": "down2"}, {"src": "P4", "resample": "up2"}], "weights": [1, 1]},
    ]))
    s = bifpn.graph_simplify(g)
    assert s.nodes["O"].edges[0] == bifpn.Edge("P3", ())
    assert len(s.nodes["O"].edges) == 2  # the composed edge is already the skip


def test_pan_simplifies_to_default():
    s = bifpn.graph_simplify(bifpn.pan_neck())
    assert bifpn.graph_to_json(s) == bifpn.graph_to_json(bifpn.default_neck())


def test_json_round_trip():
    g = bifpn.load_graph(FIX / "tiny_neck.json")
    again = bifpn.graph_from_json(json.loads(json.dumps(bifpn.graph_to_json(g))))
    assert bifpn.graph_to_json(again) == bifpn.graph_to_json(g)


def test_execute_matches_hand_composition(rng):
    g = bifpn.load_graph(FIX / "tiny_neck.json")
    ins = {lv: rng.standard_normal(d) for lv, d in g.inputs.items()}
    out = bifpn.graph_execute(g, ins, keep_all=True)
    p3, p4, p5 = ins["P3"], ins["P4"], ins["P5"]
    spec = json.loads((FIX / "tiny_neck.json").read_text())["nodes"][3]["post"]["conv"]
    wm, bv = np.array(spec["weight"]), np.array(spec["bias"])
    p4td = fuse([up(p5), p4], [0.7, 1.3])
    p4td = silu(np.einsum("oc,nchw->nohw", wm, p4td) + bv[None, :, None, None])
    p3out = fuse([up(p4td), p3], [1.0, 0.5])
    p4out = fuse([down(p3out), p4td, p4], [1.0, 2.0, -1.0])
    p5out = silu(fuse([down(p4out), p5], [1.0, 1.0]))
    for name, ref in (("P4td", p4td), ("P3out", p3out), ("P4out", p4out), ("P5out", p5out)):
        np.testing.assert_allclose(out[name], ref, rtol=1e-12, atol=1e-13)


def test_execute_input_errors(rng):
    g = bifpn.default_neck()
    ins = {lv: rng.standard_normal(d) for lv, d in g.inputs.items()}
    with pytest.raises(ConfigError):
        bifpn.graph_execute(g, {k: v for k, v in ins.items() if k != "P4"})
    ins["P4"] = ins["P4"][:, :, :8]
    with pytest.raises(ShapeError):
        bifpn.graph_execute(g, ins)


def test_simplify_preserves_semantics_without_skip(rng):
    # pass nodes use epsilon 0 so they are exact identities; pinning the
    # added skip weight to 0 then recovers the original computation
    g = seven_node()
    s = bifpn.graph_simplify(g)
    node = s.nodes["P4out"]
    s.nodes["P4out"] = replace(node, weights=node.weights[:-1] + (0.0,))
    ins = {lv: rng.standard_normal(d) for lv, d in g.inputs.items()}
    a, b = bifpn.graph_execute(g, ins), bifpn.graph_execute(s, ins)
    for k in ("P3out", "P4out"):
        np.testing.assert_allclose(a[k], b[k], rtol=1e-12, atol=1e-14)


def test_apply_weights_dir(tmp_path, rng):
    g = bifpn.load_graph(FIX / "tiny_neck.json")
    w = rng.standard_normal((4, 4)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    write_bst(tmp_path / "cw.bst", w)
    write_bst(tmp_path / "cb.bst", b)
    (tmp_path / "manifest.json").write_text(json.dumps(
        {"nodes": {"P4td": {"weights": [2.0, 0.0], "conv_weight": "cw.bst", "conv_bias": "cb.bst"}}}))
    g2 = bifpn.apply_weights_dir(g, tmp_path)
    n = g2.nodes["P4td"]
    assert n.weights == (2.0, 0.0)
    np.testing.assert_array_equal(n.conv.weight, w)
    assert g.nodes["P4td"].weights == (0.7, 1.3)
