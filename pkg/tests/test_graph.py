import numpy as np
import pytest

from morphnas import ops
from morphnas.blob import BlobFormatError, pack_tensors, unpack_tensors
from morphnas.data import make_initial_model
from morphnas.graph import GraphError, GraphFormatError, NetworkGraph, add_dense
from morphnas.morph import apply_net_morphs, verify_preservation, widen

F32 = np.float32


def test_linear_graph_matches_manual_composition():
    rng = np.random.default_rng(0)
    g = NetworkGraph()
    x = g.add("Input", attrs=dict(channels=2, height=3, width=3))
    f = g.add("Flatten", [x])
    d = add_dense(g, f, 18, 4, rng)
    g.output_id = g.add("Softmax", [d])
    g.validate()
    batch = rng.standard_normal((5, 2, 3, 3)).astype(F32)
    node = g.nodes[d]
    logits = batch.reshape(5, -1) @ node.params["weight"].T + node.params["bias"]
    expect = np.exp(logits - logits.max(1, keepdims=True))
    expect /= expect.sum(1, keepdims=True)
    np.testing.assert_allclose(g.forward(batch), expect, rtol=1e-6)


def test_clone_is_bit_identical_and_independent(model, probe):
    c = model.clone()
    assert c.forward(probe).tobytes() == model.forward(probe).tobytes()
    before = model.forward(probe).copy()
    c.nodes[1].params["weight"][0, 0, 0, 0] += 1.0
    cc = c.clone()
    cc.nodes[1].params["weight"][0, 0, 0, 0] += 1.0
    assert np.array_equal(model.forward(probe), before)
    assert not np.array_equal(c.forward(probe), cc.forward(probe))
    assert c.param_count() == model.param_count() == cc.param_count()


def test_infer_forward_is_pure(model, probe):
    a = model.forward(probe)
    b = model.forward(probe)
    assert a.tobytes() == b.tobytes()


def test_dense_param_count():
    g = NetworkGraph()
    x = g.add("Input", attrs=dict(channels=10, height=1, width=1))
    f = g.add("Flatten", [x])
    d = add_dense(g, f, 10, 10, np.random.default_rng(0))
    g.output_id = g.add("Softmax", [d])
    assert g.param_count() == 110


def test_widen_doubles_output_extent(model):
    w = widen(model, 1, 2)
    assert w.nodes[1].params["weight"].shape[0] == 2 * model.nodes[1].params["weight"].shape[0]


def test_initial_model_shapes_by_hand():
    g = make_initial_model((3, 32, 32), 10, channels=16)
    shapes = g.shape_infer()
    kinds = [g.nodes[n].kind for n in g.topo_order()]
    got = {k: [] for k in set(kinds)}
    for n in g.topo_order():
        got[g.nodes[n].kind].append(shapes[n])
    assert got["Conv"] == [(16, 32, 32), (16, 16, 16), (16, 8, 8)]
    assert got["MaxPool"] == [(16, 16, 16), (16, 8, 8)]
    assert got["Flatten"] == [(16 * 8 * 8,)]
    assert got["Softmax"] == [(10,)]


def test_insertion_order_invariance(model, probe):
    """Rebuild the same DAG with shuffled node ids; outputs must agree."""
    order = model.topo_order()
    perm = np.random.default_rng(5).permutation(len(order))
    id_map = {old: int(new) + 100 for old, new in zip(order, perm)}
    g = NetworkGraph()
    for old in sorted(order, key=id_map.get):
        n = model.nodes[old]
        g.nodes[id_map[old]] = type(n)(id_map[old], n.kind, [id_map[i] for i in n.inputs],
                                       dict(n.attrs), {k: v.copy() for k, v in n.params.items()},
                                       {k: v.copy() for k, v in n.buffers.items()})
    g.input_id, g.output_id = id_map[model.input_id], id_map[model.output_id]
    g.next_id = 1000
    g.validate()
    assert g.forward(probe).tobytes() == model.forward(probe).tobytes()


def test_cycle_detection(model):
    g = model.clone()
    g.nodes[1].inputs = [3]
    with pytest.raises(GraphError):
        g.topo_order()


def test_shape_mismatch_reported(model):
    g = model.clone()
    g.nodes[5].attrs["in_channels"] = 99
    with pytest.raises(GraphError):
        g.validate()


def test_bad_batch_shape(model):
    with pytest.raises(ops.ShapeError):
        model.forward(np.zeros((2, 3, 8, 8), F32))


def test_unreachable_node(model):
    g = model.clone()
    g.add("Relu", [3])
    with pytest.raises(GraphError):
        g.validate()


# -- serialization ---------------------------------------------------------------

def test_roundtrip_default_model(model, probe):
    text, blob = model.serialize()
    assert text.startswith("NMGRAPH v1\n")
    assert blob[:4] == b"NMT1"
    back = NetworkGraph.deserialize(text, blob)
    assert back.forward(probe).tobytes() == model.forward(probe).tobytes()
    assert back.next_id == model.next_id
    assert back.serialize() == (text, blob)


def test_corrupt_magic(model):
    text, blob = model.serialize()
    with pytest.raises(GraphFormatError):
        NetworkGraph.deserialize(text, b"XXXX" + blob[4:])


def test_version_and_count_mismatch(model):
    text, blob = model.serialize()
    with pytest.raises(GraphFormatError):
        NetworkGraph.deserialize(text.replace("v1", "v2", 1), blob)
    short = pack_tensors(unpack_tensors(blob)[:-1])
    with pytest.raises(GraphFormatError):
        NetworkGraph.deserialize(text, short)
    with pytest.raises(GraphFormatError):
        NetworkGraph.deserialize(text.replace("node 1 Conv", "node 1 Cnv"), blob)
    with pytest.raises(GraphFormatError):
        NetworkGraph.deserialize(text, blob[:-3])


def test_roundtrip_after_morphisms_still_preserves(model, small_data, tmp_path):
    rng = np.random.default_rng(7)
    after, _ = apply_net_morphs(model, 3, rng, calibration=small_data.train.images[:64])
    after.save(tmp_path / "m")
    back = NetworkGraph.load(tmp_path / "m")
    assert verify_preservation(model, back, n_samples=64, tolerance=1e-4).passed
    probe = small_data.val.images[:32]
    assert back.forward(probe).tobytes() == after.forward(probe).tobytes()


def test_blob_layout_is_little_endian():
    blob = pack_tensors([np.array([[1.0, 2.0, 3.0]], F32)])
    assert blob[:4] == b"NMT1"
    assert blob[4:8] == (1).to_bytes(4, "little")
    assert blob[8:12] == (2).to_bytes(4, "little")
    assert blob[12:20] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(blob[20:], "<f4").tolist() == [1.0, 2.0, 3.0]
    with pytest.raises(BlobFormatError):
        unpack_tensors(blob + b"\0")


def test_summary_lists_params(model):
    s = model.summary()
    assert f"total parameters: {model.param_count()}" in s
