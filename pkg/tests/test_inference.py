import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtss.embeddings import LabelDictionary, nearest_label
from mtss.inference import PredictionError, predict, predict_batch
from mtss.student import StudentModel


def crafted_student(seed=0, dim=6):
    torch.manual_seed(seed)
    s = StudentModel({"color": dim, "shape": dim})
    rng = np.random.default_rng(seed)
    s.attach_dictionaries({
        "color": LabelDictionary("color", ("red", "green", "blue", "yellow"), rng.standard_normal((4, dim))),
        "shape": LabelDictionary("shape", ("circle", "square"), rng.standard_normal((2, dim))),
    })
    s.image_size = 16
    s.eval()
    return s


def images(n, seed=0):
    return list(np.random.default_rng(seed).random((n, 16, 16, 3)))


def test_branch_equal_to_row_ranks_first():
    s = crafted_student()
    row = s.dictionaries["color"].matrix[2]
    with torch.no_grad():
        branch = s.branches["color"]
        branch.weight.zero_()
        branch.bias.copy_(torch.tensor(3.0 * row, dtype=torch.float32))
    p = predict(s, images(1)[0], k=2)
    assert p.top1("color") == "blue"
    assert p.ranked["color"][0][1] == pytest.approx(1.0, abs=1e-6)


def test_single_backbone_pass_per_image():
    s = crafted_student()
    predict(s, images(1)[0], k=2)
    assert s.backbone_calls == 1
    s.backbone_calls = 0
    predict_batch(s, images(7), k=1, batch_size=100)
    assert s.backbone_calls == 1


def test_k_one_matches_nearest_label_and_cap():
    s = crafted_student(1)
    img = images(1, 3)[0]
    p = predict(s, img, k=3)
    assert len(p.ranked["color"]) == 3
    assert len(p.ranked["shape"]) == 2  # capped at the class count
    with torch.no_grad():
        out = s(torch.from_numpy(img.transpose(2, 0, 1)[None]).float())
    for t in ("color", "shape"):
        name, _ = nearest_label(out[t][0].double().numpy(), s.dictionaries[t])
        assert predict(s, img, k=1).top1(t) == name


def test_prediction_invariants():
    s = crafted_student(2)
    for img in images(5, 1):
        p = predict(s, img, k=4)
        for t, pairs in p.ranked.items():
            scores = [sc for _, sc in pairs]
            assert scores == sorted(scores, reverse=True)
            assert len({c for c, _ in pairs}) == len(pairs)
            assert all(-1.0 <= sc <= 1.0 for sc in scores)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100.0))
def test_scores_invariant_to_branch_scale(scale):
    s = crafted_student(3)
    img = images(1, 4)[0]
    ref = predict(s, img, k=4)
    with torch.no_grad():
        for b in s.branches.values():
            b.weight.mul_(scale)
            b.bias.mul_(scale)
    got = predict(s, img, k=4)
    for t in ref.ranked:
        assert [c for c, _ in got.ranked[t]] == [c for c, _ in ref.ranked[t]]
        np.testing.assert_allclose([v for _, v in got.ranked[t]], [v for _, v in ref.ranked[t]], atol=1e-5)


def test_batch_consistency():
    s = crafted_student(4)
    imgs = images(5, 2)
    imgs.append(imgs[1])
    batch = predict_batch(s, imgs, k=2, batch_size=4)
    assert len(batch) == 6
    assert batch[1] == batch[5]
    single = [predict(s, im, k=2) for im in imgs]
    for a, b in zip(batch, single):
        for t in a.ranked:
            assert [c for c, _ in a.ranked[t]] == [c for c, _ in b.ranked[t]]
            np.testing.assert_allclose([v for _, v in a.ranked[t]], [v for _, v in b.ranked[t]], atol=1e-6)
    assert predict_batch(s, [], k=2) == []


def test_errors():
    s = crafted_student()
    with pytest.raises(PredictionError):
        predict(s, images(1)[0], k=0)
    with pytest.raises(PredictionError):
        predict(s, np.zeros((20, 20, 3)), k=1)
    bare = StudentModel({"color": 4})
    with pytest.raises(PredictionError):
        predict(bare, images(1)[0])
    bad = images(3)
    bad[2] = np.zeros((8, 8, 3))
    with pytest.raises(PredictionError, match="image 2"):
        predict_batch(s, bad, k=1)


def test_json_output():
    p = predict(crafted_student(), images(1)[0], k=1)
    d = p.to_dict()
    assert set(d) == {"color", "shape"}
    assert set(d["color"][0]) == {"class", "score"}
    assert '"class"' in p.to_json()
