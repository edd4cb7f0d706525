import numpy as np
import pytest
import torch

from mtss.config import TrainConfig
from mtss.embeddings import LabelDictionary, init_label_dictionary
from mtss.schema import AttributeSchema, DatasetManifest, ImageRecord
from mtss.synthdata import SynthConfig, generate_synthetic_dataset
from mtss.teacher import (SamplingError, TeacherModel, TripletSampler, load_teacher, save_teacher,
                          step_decay_lr, teacher_embed, train_teacher)

SCHEMA = AttributeSchema.from_mapping({"color": ["red", "green", "blue"]})


def manifest_from(labels):
    recs = [ImageRecord(f"r{i}", f"r{i}.png", {"color": set(ls)} if ls else {}) for i, ls in enumerate(labels)]
    return DatasetManifest(SCHEMA, recs)


def test_sampler_two_class_example():
    schema = AttributeSchema.from_mapping({"color": ["red", "green"]})
    m = DatasetManifest(schema, [ImageRecord("a", "a.png", {"color": {"red"}}),
                                 ImageRecord("b", "b.png", {"color": {"green"}})])
    batch = TripletSampler(m, "color").sample(64, np.random.default_rng(0))
    for a, p, n in zip(batch.anchors, batch.positives, batch.negatives):
        assert p == a  # record index equals class index here
        assert n == 1 - a


def test_sampler_excludes_multilabel_negatives():
    m = manifest_from([["red"], ["green", "red"], ["green"], ["blue"], ["blue", "red"]])
    sampler = TripletSampler(m, "color")
    batch = sampler.sample(500, np.random.default_rng(1))
    for a, p, n in zip(batch.anchors, batch.positives, batch.negatives):
        cls = SCHEMA["color"].classes[a]
        assert cls in m.records[p].labels_for("color")
        assert cls not in m.records[n].labels_for("color")
    # anchors roughly uniform over classes
    counts = np.bincount(batch.anchors, minlength=3)
    assert counts.min() > 120


def test_sampler_errors():
    with pytest.raises(SamplingError, match="blue"):
        TripletSampler(manifest_from([["red"], ["green"]]), "color")
    with pytest.raises(SamplingError):
        TripletSampler(manifest_from([["red", "green", "blue"], ["red", "green", "blue"]]), "color")


def test_sampler_deterministic():
    m = manifest_from([["red"], ["green"], ["blue"], ["red"]])
    a = TripletSampler(m, "color").sample(32, np.random.default_rng([3, 0, 1]))
    b = TripletSampler(m, "color").sample(32, np.random.default_rng([3, 0, 1]))
    for x, y in zip((a.anchors, a.positives, a.negatives), (b.anchors, b.positives, b.negatives)):
        np.testing.assert_array_equal(x, y)


def test_step_decay():
    cfg = TrainConfig(lr=0.2, lr_decay_factor=0.5, lr_decay_every_epochs=10)
    assert step_decay_lr(cfg, 0) == 0.2
    assert step_decay_lr(cfg, 9) == 0.2
    assert step_decay_lr(cfg, 10) == 0.1
    assert step_decay_lr(cfg, 25) == 0.05


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    cfg = SynthConfig(image_size=16, n_colors=3, n_shapes=2, n_patterns=2, n_textures=2, n_images=90, seed=8)
    return generate_synthetic_dataset(cfg, tmp_path_factory.mktemp("tiny"))


FAST = TrainConfig(dim=8, lr=0.2, epochs=2, batch_size=16, samples_per_epoch=64, lr_decay_every_epochs=1)


def test_zero_epochs_returns_initial_dictionary(tiny):
    res = train_teacher(tiny, "color", FAST.replace(epochs=0, seed=5))
    init = init_label_dictionary("color", tiny.schema["color"].classes, 8, seed=5)
    np.testing.assert_array_equal(res.model.label_dictionary().matrix, init.matrix.astype(np.float32))
    assert res.loss_trace == []


def test_training_is_deterministic(tiny):
    a = train_teacher(tiny, "shape", FAST.replace(seed=3))
    b = train_teacher(tiny, "shape", FAST.replace(seed=3))
    assert a.loss_trace == b.loss_trace
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, b.model.state_dict()[k])
    c = train_teacher(tiny, "shape", FAST.replace(seed=4))
    assert c.loss_trace != a.loss_trace


def test_loss_trace_and_selection(tiny):
    res = train_teacher(tiny, "color", FAST, val_manifest=tiny)
    assert len(res.loss_trace) == 2 * (64 // 16)
    assert [lr for _, _, lr in res.loss_trace] == [0.2] * 4 + [0.1] * 4
    assert len(res.val_history) == 2
    assert res.best_epoch == int(np.argmax(res.val_history))


def test_teacher_embed_and_checkpoint(tiny, tmp_path):
    res = train_teacher(tiny, "pattern", FAST)
    img = np.random.default_rng(0).random((16, 16, 3))
    e = teacher_embed(res.model, img)
    assert e.shape == (8,)
    save_teacher(res.model, tmp_path / "t", FAST, 16, res.loss_trace)
    back = load_teacher(tmp_path / "t")
    np.testing.assert_allclose(teacher_embed(back, img), e, atol=0, rtol=0)
    d = LabelDictionary.load(tmp_path / "t" / "dictionary_pattern.txt")
    np.testing.assert_array_equal(d.matrix, res.model.label_dictionary().matrix)
    assert (tmp_path / "t" / "loss_trace.csv").read_text().startswith("step,loss,lr")
    with pytest.raises(ValueError):
        teacher_embed(back, np.zeros((20, 20, 3)))


def test_top_classes_restricts_anchors(tiny):
    res = train_teacher(tiny, "color", FAST.replace(top_classes=2, epochs=1))
    assert res.model.classes == tiny.schema["color"].classes


def test_score_batch_matches_cosines(tiny):
    model = TeacherModel("color", tiny.schema["color"].classes, 8)
    x = torch.rand(4, 3, 16, 16)
    scores = model.score_batch(x)["color"]
    with torch.no_grad():
        e = model(x).double().numpy()
    d = model.label_dictionary().normalized()
    ref = (e / np.linalg.norm(e, axis=1, keepdims=True)) @ d.T
    np.testing.assert_allclose(scores, ref, atol=1e-6)


@pytest.mark.parametrize("preset", ["small", "wide", "medium", "resnet50"])
def test_backbone_output_independent_of_batch(preset):
    from mtss.nets import build_backbone

    torch.manual_seed(0)
    net = build_backbone(preset).eval()
    x = torch.rand(3, 3, 32, 32)
    with torch.no_grad():
        together = net(x)
        alone = net(x[:1])
    assert together.shape == (3, net.out_dim)
    assert torch.allclose(together[:1], alone, atol=1e-5)
