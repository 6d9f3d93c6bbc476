import numpy as np
import pytest

from pfsfusion import models as M
from pfsfusion import synthcohort as S
from pfsfusion import tensor as T
from pfsfusion.errors import DimensionError, LeakageError, UsageError, ValidationError

SMALL = dict(widths=(2, 3, 4, 5), stem_pools=0, input_shape=(10, 8, 8), head_widths=(8, 4))


def spec(kind, **kw):
    return M.ModelSpec(kind, **{**SMALL, **kw})


def rand_batch(model, n, rng, stemmed=False):
    shape = model.spec.input_shape
    img = lambda: rng.normal(size=(n, 1) + shape).astype(np.float32)
    return M.Batch(img() if model.kind.uses_pet else None, img() if model.kind.uses_ct else None,
                   rng.normal(size=(n, 4)).astype(np.float32) if model.kind.uses_labs else None,
                   np.arange(n) % 2, stemmed=stemmed)


def tensors(model, b):
    return dict(pet=b.pet, ct=b.ct, labs=b.labs)


class TestStructure:
    def test_branches(self):
        for kind in M.ALL_KINDS:
            if kind.is_forest:
                assert isinstance(M.build_model(spec(kind)), M.ForestModel)
                continue
            m = M.build_model(spec(kind))
            assert (m.pet_encoder is not None) == kind.uses_pet
            assert (m.ct_encoder is not None) == kind.uses_ct

    def test_pet_only(self):
        m = M.build_model(spec("PET_ONLY"))
        assert len(m.encoders) == 1 and m.head.in_dim == m.embed_dim

    def test_head_width(self):
        m = M.build_model(spec("PETCT_FUSION"))
        assert m.head.in_dim == 2 * m.embed_dim + 4
        assert m.pet_encoder.embed_dim == m.ct_encoder.embed_dim

    def test_default_embedding(self):
        enc = M.Encoder3D((8, 16, 32, 64), (75, 50, 50), 2, np.random.default_rng(0))
        assert enc.stem_shape == (19, 13, 13)
        assert enc.output_shape == (64, 2, 1, 1)
        x = T.Tensor(np.zeros((1, 1, 19, 13, 13), np.float32))
        with T.no_grad():
            assert enc(x, stemmed=True).shape == (1, 128)

    def test_same_seed_same_init(self):
        a, b = M.build_model(spec("PETCT_FUSION", seed=5)), M.build_model(spec("PETCT_FUSION", seed=5))
        c = M.build_model(spec("PETCT_FUSION", seed=6))
        sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)
        assert any(not np.array_equal(sa[k], sc[k]) for k in sa)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            M.ModelSpec("NOPE")
        with pytest.raises(ValidationError):
            M.ModelSpec("PET_ONLY", widths=(1, 2, 3))
        with pytest.raises(ValidationError):
            M.ModelSpec("PET_ONLY", batch_size=0)


class TestLabs:
    def panels(self, rng, n):
        return [S.LabPanel(*rng.uniform(5, 300, 4)) for _ in range(n)]

    def test_mean_panel_is_zero(self):
        rng = np.random.default_rng(0)
        panels = self.panels(rng, 30)
        st = M.fit_lab_standardizer(panels)
        f = M.lab_features(panels).mean(0)
        # a panel whose features equal the training means: invert the CgA log
        mean_panel = S.LabPanel(f[0], f[1], f[3], float(np.exp(f[2])))
        np.testing.assert_allclose(M.standardize_labs(mean_panel, st), 0, atol=1e-5)

    def test_constant_feature(self):
        rng = np.random.default_rng(1)
        panels = [S.LabPanel(30.0, *rng.uniform(5, 300, 3)) for _ in range(10)]
        st = M.fit_lab_standardizer(panels)
        assert st.std[0] == M.LAB_STD_FLOOR
        assert np.all(M.standardize_labs(panels, st)[:, 0] == 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_moments(self, seed):
        panels = self.panels(np.random.default_rng(seed), 200)
        z = M.standardize_labs(panels, M.fit_lab_standardizer(panels)).astype(np.float64)
        np.testing.assert_allclose(z.mean(0), 0, atol=1e-4)
        np.testing.assert_allclose(z.std(0), 1, atol=1e-4)

    def test_order_and_log(self):
        p = S.LabPanel(ast_u_per_l=10.0, alt_u_per_l=20.0, ggt_u_per_l=40.0, cga_ug_per_l=float(np.e ** 3))
        np.testing.assert_allclose(M.lab_features([p])[0], [10, 20, 3, 40])

    def test_non_positive(self):
        p = S.LabPanel(10.0, 20.0, 30.0, 40.0)
        object.__setattr__(p, "cga_ug_per_l", 0.0)  # bypass the constructor check
        with pytest.raises(ValidationError):
            M.lab_features([p])


class TestForward:
    def test_reproducible(self):
        rng = np.random.default_rng(0)
        m1, m2 = M.build_model(spec("PETCT_FUSION", seed=3)), M.build_model(spec("PETCT_FUSION", seed=3))
        b = rand_batch(m1, 3, rng)
        with T.no_grad():
            assert np.array_equal(M.forward(m1, **tensors(m1, b)).data, M.forward(m2, **tensors(m2, b)).data)

    def test_duplicate_rows(self):
        rng = np.random.default_rng(1)
        m = M.build_model(spec("PETCT_FUSION"))
        b = rand_batch(m, 1, rng).take(np.array([0, 0, 0]))
        with T.no_grad():
            out = M.forward(m, **tensors(m, b)).data
        assert out[0] == out[1] == out[2]

    def test_zero_final_layer(self):
        rng = np.random.default_rng(2)
        m = M.build_model(spec("CT_FUSION"))
        m.head.weights[-1].data[:] = 0
        m.head.biases[-1].data[:] = 0.625
        with T.no_grad():
            out = M.forward(m, **tensors(m, rand_batch(m, 4, rng))).data
        assert np.all(out == np.float32(0.625))

    def test_missing_and_extra_inputs(self):
        rng = np.random.default_rng(3)
        m = M.build_model(spec("PET_FUSION"))
        b = rand_batch(m, 2, rng)
        with pytest.raises(UsageError):
            M.forward(m, pet=b.pet)
        with pytest.raises(UsageError):
            M.forward(m, pet=b.pet, ct=b.pet, labs=b.labs)
        with pytest.raises(DimensionError):
            M.forward(m, pet=b.pet[:, :, :5], labs=b.labs)

    def test_stemmed_equals_full(self):
        rng = np.random.default_rng(4)
        m = M.build_model(spec("PET_ONLY", stem_pools=1))
        b = rand_batch(m, 2, rng)
        with T.no_grad():
            full = M.forward(m, pet=b.pet).data
            stem = m.pet_encoder.stem(T.Tensor(b.pet)).data
            assert np.array_equal(M.forward(m, pet=stem, stemmed=True).data, full)


class TestTraining:
    def test_separable_labs(self):
        """Separable lab-only toy set (images constant zero): training loss drops below 0.1."""
        rng = np.random.default_rng(0)
        y = np.r_[np.zeros(10), np.ones(10)].astype(int)
        labs = rng.normal(size=(20, 4)).astype(np.float32)
        labs[:, 2] += np.where(y == 1, 2.0, -2.0)
        m = M.build_model(spec("PET_FUSION", epochs=200, batch_size=8, input_shape=(2, 2, 2)))
        data = M.Batch(np.zeros((20, 1, 2, 2, 2), np.float32), None, labs, y, stemmed=False)
        trace = M.train(m, data)
        assert len(trace) == 200 and trace[-1] < 0.1

    def test_zero_epochs(self):
        rng = np.random.default_rng(1)
        m = M.build_model(spec("PETCT_FUSION", epochs=0))
        before = m.state_dict()
        assert M.train(m, rand_batch(m, 6, rng)) == []
        after = m.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_single_class(self):
        rng = np.random.default_rng(2)
        m = M.build_model(spec("PET_ONLY"))
        b = rand_batch(m, 4, rng)
        b.y = np.ones(4, int)
        with pytest.raises(ValidationError):
            M.train(m, b)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        m1, m2 = M.build_model(spec("PET_FUSION", epochs=3, seed=9)), M.build_model(spec("PET_FUSION", epochs=3, seed=9))
        b = rand_batch(m1, 10, rng)
        assert M.train(m1, b) == M.train(m2, b)
        s1, s2 = m1.state_dict(), m2.state_dict()
        assert all(np.array_equal(s1[k], s2[k]) for k in s1)

    def test_forest_kind(self):
        rng = np.random.default_rng(4)
        m = M.build_model(M.ModelSpec("RF_LABS", n_trees=10))
        labs = rng.normal(size=(30, 4))
        y = (labs[:, 2] > 0).astype(int)
        M.train(m, M.Batch(labs=labs, y=y))
        assert M.predict_proba(m, M.Batch(labs=labs)).shape == (30,)
        with pytest.raises(UsageError):
            M.predict_proba(M.build_model(M.ModelSpec("RF_LABS")), M.Batch(labs=labs))

    def test_diverged(self):
        rng = np.random.default_rng(5)
        m = M.build_model(spec("PET_ONLY", epochs=1))
        b = rand_batch(m, 4, rng)
        b.pet[0, 0, 0, 0, 0] = np.nan
        with pytest.raises(M.TrainingDiverged):
            M.train(m, b)

    def test_trace_csv(self, tmp_path):
        M.write_trace_csv(tmp_path / "t.csv", [0.5, 0.25])
        assert (tmp_path / "t.csv").read_text() == "epoch,mean_loss\n1,0.50000000\n2,0.25000000\n"


class TestPredict:
    def test_logit_zero(self):
        m = M.build_model(spec("PET_ONLY"))
        m.head.weights[-1].data[:] = 0
        b = rand_batch(m, 3, np.random.default_rng(0))
        assert np.all(M.predict_proba(m, b) == 0.5)

    def test_batch_vs_single_and_idempotent(self):
        rng = np.random.default_rng(1)
        m = M.build_model(spec("PETCT_FUSION"))
        b = rand_batch(m, 7, rng)
        full = M.predict_proba(m, b, batch_size=3)
        single = np.array([M.predict_proba(m, b.take(np.array([i])))[0] for i in range(7)])
        np.testing.assert_allclose(full, single, atol=1e-6)
        assert np.array_equal(full, M.predict_proba(m, b, batch_size=3))
        assert np.all((full > 0) & (full < 1))

    def test_monotone_in_logit(self):
        m = M.build_model(spec("PET_ONLY"))
        b = rand_batch(m, 8, np.random.default_rng(2))
        with T.no_grad():
            logits = M.forward(m, pet=b.pet).data
        p = M.predict_proba(m, b)
        assert np.array_equal(np.argsort(logits, kind="stable"), np.argsort(p, kind="stable"))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        a, b = M.build_model(spec("PETCT_FUSION", seed=1)), M.build_model(spec("PETCT_FUSION", seed=2))
        a.save(tmp_path / "ck")
        b.load(tmp_path / "ck")
        sa, sb = a.state_dict(), b.state_dict()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)

    def test_shape_mismatch(self):
        a = M.build_model(spec("PET_ONLY"))
        state = a.state_dict()
        state["pet.conv0.weight"] = np.zeros((1, 1, 3, 3, 3), np.float32)
        with pytest.raises(DimensionError):
            a.load_state_dict(state)


@pytest.fixture(scope="module")
def lesion_task():
    """Stemmed, normalized CT phantoms with their lesion-fraction targets."""
    from pfsfusion import experiment as X
    from pfsfusion import preprocess as P

    pre = S.generate_pretraining_set(48, seed=7)
    cached = [X._cache_volume(v, 2, False) for _, v, _ in pre]
    norm = P.normalizer_from_moments([c[0] for c in cached], "CT")
    x = np.stack([((c[1] - norm.mean) / norm.std).astype(np.float32) for c in cached])
    return x, np.array([p[2] for p in pre]), [p[0] for p in pre]


class TestPretraining:
    def encoder(self, seed=1, widths=(4, 8, 16, 32)):
        return M.Encoder3D(widths, (75, 50, 50), 2, np.random.default_rng(seed), "ct")

    def test_improves_and_changes(self, lesion_task):
        x, t, ids = lesion_task
        enc, fresh = self.encoder(), self.encoder()
        r = M.pretrain_ct_encoder(enc, x, t, ids, forbidden_ids=["p001"], epochs=10, seed=0)
        assert r.val_mse_after < r.val_mse_before
        with T.no_grad():
            a = enc(T.Tensor(x[:4]), True).data
            b = fresh(T.Tensor(x[:4]), True).data
        assert np.linalg.norm(a - b) > 0

    def test_leakage(self, lesion_task):
        x, t, ids = lesion_task
        with pytest.raises(LeakageError):
            M.pretrain_ct_encoder(self.encoder(), x, t, ids, forbidden_ids=[ids[3]], epochs=1)

    def test_copy_encoder(self):
        src, dst = self.encoder(), self.encoder(seed=9)
        M.copy_encoder(src, dst)
        assert all(np.array_equal(a.data, b.data) for a, b in zip(src.parameters(), dst.parameters()))
        with pytest.raises(DimensionError):
            M.copy_encoder(src, self.encoder(widths=(4, 8, 16, 16)))
