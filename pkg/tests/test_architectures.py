import csv
import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiocnn import architectures as A


def test_fully_connected_counts_exact():
    c = A.count_costs(A.build_fully_connected(3, 1000, 3087))
    # 6144*1000 + 2*1000*1000 + 1000*3087
    assert c.weights == 11_231_000
    assert c.multiplies == 11_231_000
    assert c.biases_bn == 3 * 1000 + 3087


def test_vgg_counts():
    c = A.count_costs(A.build_vgg_audio(3087))
    conv = sum(r.weights for r in c.layers if r.kind == "conv")
    assert conv == 20_017_728
    assert c.weights - conv == 3072 * 4096 + 4096 * 4096 + 4096 * 3087
    assert abs(c.weights / 62e6 - 1) <= 0.05
    assert abs(c.multiplies / 2.4e9 - 1) <= 0.05


@pytest.mark.parametrize(
    "name,weights,mults,tol",
    [("resnet", 30e6, 1.9e9, 0.05), ("inception", 28e6, 4.7e9, 0.10)],
)
def test_counts_near_published(name, weights, mults, tol):
    c = A.count_costs(A.build(name, 3087))
    assert abs(c.weights / weights - 1) <= tol
    assert abs(c.multiplies / mults - 1) <= tol


def test_alexnet_carries_reconciliation_note():
    spec = A.build_alexnet_audio()
    c = A.count_costs(spec)
    assert c.weights > 37.3e6
    assert "37.3M" in c.notes


def test_shapes_and_final_pool_geometry():
    assert A.infer_shapes(A.build_resnet50_audio(10)) == (10,)
    rows = {r.name: r for r in A.count_costs(A.build_resnet50_audio(10)).layers}
    assert rows["avgpool"].output_shape == (1, 1, 2048)
    rows = {r.name: r for r in A.count_costs(A.build_inception_v3_audio(10)).layers}
    assert rows["avgpool"].output_shape == (1, 1, 2048)


def test_json_round_trip_and_digest():
    for name in A.BUILDERS:
        spec = A.build(name, 17)
        again = A.ArchitectureSpec.from_json(spec.to_json())
        assert again == spec
        assert again.digest() == spec.digest()
    assert A.build("fc", 17).digest() != A.build("fc", 18).digest()


def test_cost_csv_totals_match():
    c = A.count_costs(A.build_fully_connected(num_labels=5))
    rows = list(csv.DictReader(io.StringIO(c.to_csv())))
    assert rows[-1]["layer"] == "TOTAL"
    assert int(rows[-1]["weights"]) == sum(int(r["weights"]) for r in rows[:-1]) == c.weights


def test_pooling_and_batchnorm_cost_no_multiplies():
    for r in A.count_costs(A.build_resnet50_audio(3)).layers:
        if r.kind in ("batchnorm", "maxpool", "avgpool"):
            assert r.multiplies == 0 and r.weights == 0


def test_bottleneck_shrinks_output_head_above_4096_labels():
    for labels in (4097, 5000, 30871):
        spec = A.build_resnet50_audio(labels)
        full = A.output_head_weights(spec)
        bneck = A.output_head_weights(A.with_bottleneck(spec))
        assert full == 2048 * labels
        assert bneck == 2048 * 128 + 128 * labels
        assert full > 10 * bneck


def test_bottleneck_requires_head():
    spec = A.build_fully_connected(num_labels=3)
    headless = A.ArchitectureSpec("x", spec.layers[:-1], 3)
    with pytest.raises(A.ArchitectureError, match="no output head"):
        A.with_bottleneck(headless)


def test_shrink_keeps_head_and_bottleneck():
    spec = A.shrink(A.with_bottleneck(A.build_resnet50_audio(8)), 0.125)
    rows = {r.name: r for r in A.count_costs(spec).layers}
    assert rows["bottleneck"].output_shape == (128,)
    assert rows["output"].output_shape == (8,)
    assert rows["conv1"].output_shape[-1] == 8
    assert A.shrink(spec, 1.0) is spec


@pytest.mark.parametrize("labels", [8, 400])
def test_resnet_eighth_width_under_a_million_weights(labels):
    assert A.count_costs(A.shrink(A.build_resnet50_audio(labels), 0.125)).weights < 1_000_000


@pytest.mark.parametrize("name", sorted(A.BUILDERS))
def test_every_architecture_shrinks_to_a_valid_graph(name):
    assert A.infer_shapes(A.shrink(A.build(name, 8), 0.125)) == (8,)


def test_invalid_graphs_are_rejected():
    too_small = A.ArchitectureSpec(
        "bad",
        (A.conv("c", 4, kernel=(5, 5), padding="valid"), A.LayerSpec("flatten", "f"), A.dense("output", 2),
         A.LayerSpec("sigmoid", "s")),
        2,
        input_shape=(3, 3, 1),
    )
    with pytest.raises(A.ArchitectureError, match="invalid architecture"):
        A.count_costs(too_small)
    with pytest.raises(A.ArchitectureError):
        A.LayerSpec("warp", "w")
    with pytest.raises(A.ArchitectureError):
        A.build("lenet", 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 300), st.integers(1, 50))
def test_fc_counts_formula(layers, units, labels):
    c = A.count_costs(A.build_fully_connected(layers, units, labels))
    expected = 6144 * units + (layers - 1) * units * units + units * labels
    assert c.weights == c.multiplies == expected
