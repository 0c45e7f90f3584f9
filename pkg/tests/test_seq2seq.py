import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from charcorrect._validation import ShapeError
from charcorrect.alphabet import EMPTY, FRAME_LENGTH, N_CLASSES, SYMBOLS, index_char, one_hot_rows
from charcorrect.classify import TrainingHyper
from charcorrect.corrupt import load_corpus
from charcorrect.rnn import BlstmLayer
from charcorrect.seq2seq import (
    ARCHITECTURES,
    ArchitectureSpec,
    CorrectorModel,
    PaddedPair,
    SequenceCorrector,
    clip_gradients,
    correct,
    corrector_forward,
    decode_output,
    encode_target,
    get_architecture,
    load_checkpoint,
    loss_and_gradients,
    onehot_maps,
    read_dataset,
    save_checkpoint,
    sequence_accuracy,
    stack_pairs,
    train_corrector,
    write_dataset,
)

from gradcheck import TOL, sampled_rel_error

legal = st.text(alphabet=SYMBOLS, max_size=20)


def micro_model(seed=0):
    spec = ArchitectureSpec("micro", (4,))
    model = CorrectorModel.init(spec, seed)
    rng = np.random.default_rng(seed)
    for v in model.params().values():
        v[...] = rng.normal(scale=0.5, size=v.shape)
    return model


def tiny_task(words=("sony", "cat", "go")):
    maps = np.stack([one_hot_rows(w) for w in words])
    targets = np.stack([encode_target(w) for w in words])
    return maps, targets


class TestEncoding:
    def test_abc(self):
        t = encode_target("abc")
        assert list(t[:20]) == [EMPTY] * 20
        assert [index_char(i) for i in t[20:23]] == list("abc") and t[23] == EMPTY

    def test_empty_word(self):
        assert list(encode_target("")) == [EMPTY] * 24

    def test_twenty_chars_leave_three_empties(self):
        t = encode_target("a" * 20)
        assert list(t[:3]) == [EMPTY] * 3 and EMPTY not in t[3:23]

    def test_too_long(self):
        with pytest.raises(ValueError):
            encode_target("a" * 21)
        assert len(encode_target("a" * 13, context_min=10)) == 24
        with pytest.raises(ValueError):
            encode_target("a" * 14, context_min=10)

    def test_illegal_symbol(self):
        with pytest.raises(ValueError):
            encode_target("a-b")

    def test_corpus_round_trip(self):
        for w in load_corpus():
            assert decode_output(encode_target(w)) == w

    @given(legal)
    def test_round_trip_and_shape(self, w):
        t = encode_target(w)
        assert decode_output(t) == w and t[-1] == EMPTY and int(np.sum(t != EMPTY)) == len(w)

    def test_lenient_decode(self):
        assert decode_output([10, EMPTY, 11] + [EMPTY] * 21) == "ab"
        assert decode_output([EMPTY] * 24) == ""


class TestArchitectures:
    def test_model_1(self):
        spec = get_architecture("model-1")
        assert spec.units == (102, 156) and spec.dropout == (0.0, 0.0)

    def test_model_17(self):
        spec = get_architecture("model-17")
        assert spec.units == (450, 400, 350, 300) and spec.dropout == (0.0, 0.5, 0.5, 0.5)

    def test_all_named_configs_chain(self):
        assert {f"model-{i}" for i in range(1, 19)} | {"17-mini"} == set(ARCHITECTURES)
        for spec in ARCHITECTURES.values():
            widths = spec.widths()
            assert widths[0] == N_CLASSES and widths[-1] == N_CLASSES
            assert widths[1:-1] == [2 * u for u in spec.units]

    def test_small_models_construct(self):
        for name in ("model-1", "model-3", "17-mini"):
            model = CorrectorModel.init(get_architecture(name), 0)
            assert model.W_out.shape == (N_CLASSES, 2 * get_architecture(name).units[-1])

    def test_unknown(self):
        with pytest.raises(KeyError, match="model-17"):
            get_architecture("model-99")

    @pytest.mark.parametrize("kw", [{"units": ()}, {"units": (3,), "dropout": (1.0,)}, {"units": (3, 4), "dropout": (0.5,)}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            ArchitectureSpec("bad", **kw)

    def test_geometry_mismatch(self):
        spec = ArchitectureSpec("x", (3,))
        with pytest.raises(ShapeError):
            CorrectorModel(spec, [BlstmLayer.init(N_CLASSES, 4, 0)], np.zeros((N_CLASSES, 8)), np.zeros(N_CLASSES))


class TestForward:
    def test_zero_model_uniform(self):
        model = CorrectorModel.init(ArchitectureSpec("z", (3,)), 0)
        for v in model.params().values():
            v[...] = 0
        probs = corrector_forward(model, one_hot_rows("abc"))
        assert probs.shape == (24, N_CLASSES)
        np.testing.assert_allclose(probs, 1 / N_CLASSES)

    def test_rows_sum_to_one_and_batch(self):
        model = CorrectorModel.init(get_architecture("17-mini"), 1)
        maps, _ = tiny_task()
        probs = corrector_forward(model, maps)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(probs[1], corrector_forward(model, maps[1]), atol=1e-13)

    def test_seeded_regression_fixture(self):
        model = CorrectorModel.init(get_architecture("17-mini"), 0)
        a = corrector_forward(model, one_hot_rows("sony"))
        b = corrector_forward(CorrectorModel.init(get_architecture("17-mini"), 0), one_hot_rows("sony"))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, corrector_forward(CorrectorModel.init(get_architecture("17-mini"), 1),
                                                       one_hot_rows("sony")))

    def test_wrong_rows(self):
        model = CorrectorModel.init(ArchitectureSpec("z", (3,)), 0)
        with pytest.raises(ShapeError):
            corrector_forward(model, np.full((22, N_CLASSES), 1 / N_CLASSES))

    def test_untrained_output_is_a_word(self):
        w = correct(CorrectorModel.init(get_architecture("17-mini"), 2), one_hot_rows("sony"))
        assert isinstance(w, str) and len(w) <= 24

    def test_onehot_maps(self):
        m = np.full((2, FRAME_LENGTH, N_CLASSES), 0.01)
        m[:, :, 5] = 0.5
        out = onehot_maps(m)
        assert np.all(out.argmax(-1) == 5) and np.all(out.sum(-1) == 1)


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_micro_model(self, seed):
        model = micro_model(seed)
        rng = np.random.default_rng(10 + seed)
        maps = rng.dirichlet(np.ones(N_CLASSES), size=(2, FRAME_LENGTH))
        targets = rng.integers(0, N_CLASSES, size=(2, FRAME_LENGTH + 1))
        _, grads = loss_and_gradients(model, maps, targets)
        f = lambda: loss_and_gradients(model, maps, targets)[0]
        for name, p in model.params().items():
            assert sampled_rel_error(f, p, grads[name], 40, rng) < TOL, name

    def test_with_dropout_mask_fixed_by_seed(self):
        spec = ArchitectureSpec("d", (3, 3), (0.0, 0.5))
        model = CorrectorModel.init(spec, 0)
        rng = np.random.default_rng(4)
        for v in model.params().values():
            v[...] = rng.normal(scale=0.5, size=v.shape)
        maps = rng.dirichlet(np.ones(N_CLASSES), size=(2, FRAME_LENGTH))
        targets = rng.integers(0, N_CLASSES, size=(2, FRAME_LENGTH + 1))
        f = lambda: loss_and_gradients(model, maps, targets, np.random.default_rng(9))[0]
        _, grads = loss_and_gradients(model, maps, targets, np.random.default_rng(9))
        for name, p in model.params().items():
            assert sampled_rel_error(f, p, grads[name], 20, rng) < TOL, name

    def test_target_shape(self):
        model = micro_model()
        with pytest.raises(ShapeError):
            loss_and_gradients(model, one_hot_rows("ab")[None], np.zeros((1, 23), dtype=int))


class TestTraining:
    def test_zero_lr_leaves_params(self):
        model = CorrectorModel.init(get_architecture("17-mini"), 0)
        before = {k: v.copy() for k, v in model.params().items()}
        maps, targets = tiny_task()
        train_corrector(model, maps, targets, TrainingHyper(0.0, 0.9, 2), 1)
        assert all(np.array_equal(before[k], v) for k, v in model.params().items())

    def test_memorises_three_words(self):
        model = CorrectorModel.init(ArchitectureSpec("s", (16,)), 0)
        maps, targets = tiny_task()
        hist = train_corrector(model, maps, targets, TrainingHyper(5e-3, 0.9, 3), 300, validation=(maps, targets))
        assert hist[-1].train_loss < hist[0].train_loss
        assert sequence_accuracy(model, maps, targets) == 1.0
        assert correct(model, maps) == ["sony", "cat", "go"]

    def test_deterministic(self):
        maps, targets = tiny_task()
        runs = []
        for _ in range(2):
            model = CorrectorModel.init(get_architecture("17-mini"), 3)
            train_corrector(model, maps, targets, TrainingHyper(1e-3, 0.9, 2), 2, seed=3)
            runs.append(model.params())
        assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])

    def test_clip_rescales_to_cap(self):
        g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
        assert clip_gradients(g, 1.0) == 5.0
        np.testing.assert_allclose(g["a"], [0.6, 0.0])
        np.testing.assert_allclose(g["b"], [[0.8]])

    def test_clip_below_cap_is_identity(self):
        g = {"a": np.array([0.3, -0.4])}
        clip_gradients(g, 1.0)
        np.testing.assert_array_equal(g["a"], [0.3, -0.4])

    def test_clipped_training_is_deterministic_and_bounded(self):
        maps, targets = tiny_task()
        runs = []
        for _ in range(2):
            model = CorrectorModel.init(get_architecture("17-mini"), 3)
            start = {k: v.copy() for k, v in model.params().items()}
            train_corrector(model, maps, targets, TrainingHyper(1e-2, 0.0, 3), 1, seed=3, clip_norm=0.5)
            step = np.sqrt(sum(np.sum((model.params()[k] - start[k]) ** 2) for k in start))
            assert step <= 1e-2 * 0.5 + 1e-12
            runs.append(model.params())
        assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])

    def test_bad_clip(self):
        with pytest.raises(ValueError):
            train_corrector(micro_model(), *tiny_task(), clip_norm=0.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            train_corrector(micro_model(), np.zeros((0, FRAME_LENGTH, N_CLASSES)), np.zeros((0, 24), dtype=int))


class TestPersistence:
    def test_checkpoint_round_trip(self, tmp_path):
        model = CorrectorModel.init(get_architecture("17-mini"), 4)
        save_checkpoint(model, tmp_path / "c.json", {"onehot_inputs": True})
        loaded, cfg = load_checkpoint(tmp_path / "c.json")
        assert cfg["onehot_inputs"] is True and loaded.spec == model.spec
        for k, v in model.params().items():
            np.testing.assert_array_equal(loaded.params()[k], v)

    def test_checkpoint_kind_checked(self, tmp_path):
        (tmp_path / "c.json").write_text('{"format_version": 1, "kind": "cnn"}')
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "c.json")

    def test_dataset_round_trip(self, tmp_path):
        pairs = [PaddedPair(w, encode_target(w), one_hot_rows(w)) for w in ("sony", "cat")]
        write_dataset(tmp_path / "d.jsonl", pairs)
        back = read_dataset(tmp_path / "d.jsonl")
        maps, targets, words = stack_pairs(back)
        assert words == ["sony", "cat"] and maps.shape == (2, FRAME_LENGTH, N_CLASSES)
        np.testing.assert_array_equal(targets[0], pairs[0].target)

    def test_dataset_bad_line(self, tmp_path):
        (tmp_path / "d.jsonl").write_text('{"word": "a"}\n')
        with pytest.raises(ValueError, match=":1:"):
            read_dataset(tmp_path / "d.jsonl")


class TestEstimator:
    def test_fit_predict(self):
        maps, _ = tiny_task()
        est = SequenceCorrector(arch=ArchitectureSpec("s", (16,)), learning_rate=5e-3, batch_size=3, n_epochs=300)
        est.fit(maps, ["sony", "cat", "go"])
        assert est.predict(maps) == ["sony", "cat", "go"]
        assert est.score(maps, ["sony", "cat", "go"]) == 1.0
        assert clone(est).get_params()["n_epochs"] == 300

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            SequenceCorrector().predict(tiny_task()[0])

    def test_rejects_bad_maps(self):
        with pytest.raises(ShapeError):
            SequenceCorrector().fit(np.zeros((1, 5, N_CLASSES)), ["a"])
