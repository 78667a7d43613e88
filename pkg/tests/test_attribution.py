import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vismae.attribution import (
    AttributionResult,
    background_vector,
    model_function,
    rank_features,
    shapley_static,
)
from vismae.data import EncodingManifest, generate_synthetic_cohort, prepare_dataset
from vismae.errors import ContractError
from vismae.model import EncoderConfig, SepsisModel

SMALL = EncoderConfig(d_model=16, ffn_dim=32, n_heads=4, head_hidden=16)
MANIFEST = EncodingManifest()


@pytest.fixture(scope="module")
def data():
    return prepare_dataset(generate_synthetic_cohort(60, seed=3), seed=3)


@pytest.fixture(scope="module")
def student():
    return SepsisModel.initialize(SMALL, 11, stage="student")


@pytest.fixture(scope="module")
def background(data):
    return background_vector(data.static_full[data.split("train")])


def _singletons(d):
    return [(f"x{j}", [j]) for j in range(d)]


class TestBackground:
    def test_median_and_mode(self):
        x = np.zeros((5, MANIFEST.n_full))
        x[:, 0] = [1.0, 5.0, 2.0, 9.0, 3.0]
        x[:, 2] = [1, 1, 1, 0, 0]  # gender_M is the mode
        x[:, 1] = 1 - x[:, 2]
        x[:, 7] = 1.0
        x[:, 12] = 1.0
        x[:, 46] = 1.0
        bg = background_vector(x)
        assert bg[0] == 3.0
        assert bg[1] == 0.0 and bg[2] == 1.0
        assert bg[7] == 1.0 and bg[3:7].sum() == 0.0

    def test_tie_goes_to_first_category(self):
        x = np.zeros((2, MANIFEST.n_full))
        x[0, 1] = x[1, 2] = 1.0
        assert background_vector(x)[1] == 1.0

    def test_one_hot_groups_stay_one_hot(self, background):
        for name, cols in MANIFEST.groups():
            if len(cols) > 1:
                assert background[list(cols)].sum() == 1.0

    def test_bad_shape(self):
        with pytest.raises(ContractError):
            background_vector(np.zeros((3, 10)))


class TestLinearOracle:
    """For a linear model every permutation gives the exact attribution."""

    def setup_method(self):
        rng = np.random.default_rng(0)
        self.w = rng.normal(size=6)
        self.x = rng.normal(size=(4, 6))
        self.bg = rng.normal(size=6)

    def test_matches_closed_form(self):
        res = shapley_static(lambda z: z @ self.w, self.x, self.bg, n_samples=2000, groups=_singletons(6))
        expected = self.w * (self.x - self.bg)
        assert np.all(np.abs(res.values - expected) <= 0.02 * np.abs(expected) + 1e-12)

    def test_grouped_players_sum_their_dims(self):
        groups = [("a", [0, 3]), ("b", [1]), ("c", [2, 4, 5])]
        res = shapley_static(lambda z: z @ self.w, self.x, self.bg, n_samples=100, groups=groups)
        contrib = self.w * (self.x - self.bg)
        expected = np.stack([contrib[:, [0, 3]].sum(1), contrib[:, 1], contrib[:, [2, 4, 5]].sum(1)], axis=1)
        np.testing.assert_allclose(res.group_values, expected, atol=1e-12)


class TestAxioms:
    def test_null_player_student(self, data, student, background):
        model = student.copy()
        w = model.params["cls_head.hidden.weight"].data
        age = SMALL.d_model + 0
        race = [SMALL.d_model + j for j in dict(MANIFEST.groups())["race"]]
        w[[age] + race] = 0.0
        idx = np.arange(5)
        res = shapley_static(model, data.static_full[idx], background, n_samples=100, vis=data.vis[idx])
        g = res.group_names
        assert np.all(np.abs(res.group_values[:, g.index("admission_age")]) <= 1e-9)
        assert np.all(np.abs(res.group_values[:, g.index("race")]) <= 1e-9)
        assert np.any(np.abs(res.group_values) > 1e-6)

    def test_null_player_callable(self):
        x = np.array([[1.0, 2.0, 3.0]])
        res = shapley_static(lambda z: np.tanh(z[:, 0] * z[:, 2]), x, np.zeros(3), groups=_singletons(3))
        assert res.group_values[0, 1] == 0.0

    def test_symmetry(self):
        def f(z):
            return np.tanh(z[:, 0] + z[:, 1]) + 0.3 * z[:, 2]

        x = np.array([[0.8, 0.8, -1.0]])
        res = shapley_static(f, x, np.zeros(3), n_samples=4000, groups=_singletons(3))
        a, b = res.group_values[0, :2]
        assert abs(a - b) <= 0.02 * abs(a)

    def test_local_accuracy_student(self, data, student, background):
        idx = np.arange(8)
        res = shapley_static(student, data.static_full[idx], background, n_samples=100, vis=data.vis[idx])
        assert res.local_accuracy_gap().max() <= 0.02
        f = model_function(student, data.vis[idx])
        np.testing.assert_allclose(res.f_x, f(idx, data.static_full[idx]), atol=1e-12)
        np.testing.assert_allclose(res.f_background, f(idx, np.tile(background, (8, 1))), atol=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_local_accuracy_property(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(5, 5))
        x, bg = rng.normal(size=(2, 5)), rng.normal(size=5)
        res = shapley_static(lambda z: np.sin(z @ w).sum(1), x, bg, n_samples=100, seed=seed, groups=_singletons(5))
        assert res.local_accuracy_gap().max() <= 1e-9


class TestMonteCarlo:
    """Exact values are known for a sum of products with a zero background."""

    @staticmethod
    def f(z):
        return z[:, :20].sum(1) * 0.1 + z[:, 0] * z[:, 1] * z[:, 2] + z[:, 3] * z[:, 4]

    def exact(self, x):
        phi = 0.1 * x.copy()
        phi[:, :3] += (x[:, 0] * x[:, 1] * x[:, 2])[:, None] / 3
        phi[:, 3:5] += (x[:, 3] * x[:, 4])[:, None] / 2
        return phi

    def test_error_shrinks(self):
        x = np.random.default_rng(4).uniform(1.0, 2.0, size=(3, 20))
        err = []
        for n in (100, 3000):
            res = shapley_static(self.f, x, np.zeros(20), n_samples=n, seed=1, groups=_singletons(20))
            err.append(np.abs(res.values - self.exact(x)).max())
        assert err[1] < err[0]
        assert err[1] <= 0.05 * np.abs(self.exact(x)).max()


class TestDeterminism:
    def test_same_seed_identical(self, data, student, background):
        idx = np.arange(4)
        kw = dict(n_samples=100, seed=7, vis=data.vis[idx])
        a = shapley_static(student, data.static_full[idx], background, **kw)
        b = shapley_static(student, data.static_full[idx], background, **kw)
        np.testing.assert_array_equal(a.values, b.values)

    def test_patient_order_independent(self):
        x = np.random.default_rng(0).normal(size=(3, 4))

        def f(z):
            return np.tanh(z).prod(1)

        full = shapley_static(f, x, np.zeros(4), seed=2, groups=_singletons(4))
        first = shapley_static(f, x[:1], np.zeros(4), seed=2, groups=_singletons(4))
        np.testing.assert_array_equal(full.values[:1], first.values)


class TestContracts:
    def test_wrong_stage(self, data, background):
        teacher = SepsisModel.initialize(SMALL, 0, stage="teacher")
        with pytest.raises(ContractError):
            shapley_static(teacher, data.static_full[:2], background, vis=data.vis[:2])

    def test_too_few_samples(self):
        with pytest.raises(ContractError):
            shapley_static(lambda z: z.sum(1), np.zeros((1, 2)), np.zeros(2), n_samples=50,
                           groups=_singletons(2))

    def test_vis_required(self, data, student, background):
        with pytest.raises(ContractError):
            shapley_static(student, data.static_full[:2], background)

    def test_players_must_partition(self):
        with pytest.raises(ContractError):
            shapley_static(lambda z: z.sum(1), np.zeros((1, 3)), np.zeros(3), groups=[("a", [0]), ("b", [0, 2])])


class TestRanking:
    def make(self, mean_abs, names):
        values = np.array([mean_abs])
        return AttributionResult(
            values=values, group_values=values, feature_names=names, group_names=names,
            background=np.zeros(len(names)), background_description="", f_x=np.zeros(1),
            f_background=np.zeros(1), n_samples=100, seed=0, patient_ids=["p"], static=np.zeros((1, len(names))),
        )

    def test_ties_alphabetical(self):
        res = self.make([0.5, 0.5, 0.9, 0.1], ["zeta", "alpha", "mid", "low"])
        assert [n for n, _ in rank_features(res)] == ["mid", "alpha", "zeta", "low"]

    def test_top_k(self):
        res = self.make(list(range(10)), [f"f{i}" for i in range(10)])
        assert [n for n, _ in rank_features(res, 5)] == ["f9", "f8", "f7", "f6", "f5"]

    def test_uses_absolute_values(self):
        res = self.make([-3.0, 1.0], ["neg", "pos"])
        assert rank_features(res)[0] == ("neg", 3.0)


class TestArtifacts:
    def test_save(self, tmp_path, data, student, background):
        idx = np.arange(3)
        res = shapley_static(student, data.static_full[idx], background, n_samples=100, vis=data.vis[idx],
                             patient_ids=[data.patient_ids[i] for i in idx])
        res.save(tmp_path)
        doc = json.loads((tmp_path / "attribution.json").read_text())
        assert doc["n_samples"] == 100 and len(doc["values"]) == 3
        assert doc["background_description"]
        rows = list(csv.reader(io.StringIO((tmp_path / "shap_summary.csv").read_text())))
        assert rows[0] == ["feature", "mean_abs_shap"] and len(rows) == 1 + MANIFEST.n_full
        long_rows = (tmp_path / "shap_values.csv").read_text().splitlines()
        assert len(long_rows) == 1 + 3 * MANIFEST.n_full

    def test_one_hot_value_on_active_dim(self, data, student, background):
        idx = np.arange(3)
        res = shapley_static(student, data.static_full[idx], background, n_samples=100, vis=data.vis[idx])
        cols = list(dict(MANIFEST.groups())["race"])
        g = res.group_names.index("race")
        for i in idx:
            row = res.values[i, cols]
            active = int(np.argmax(data.static_full[i, cols]))
            assert row[active] == res.group_values[i, g]
            assert np.count_nonzero(np.delete(row, active)) == 0
