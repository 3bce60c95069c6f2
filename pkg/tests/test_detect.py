import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from ffkd.autodiff import Tensor, default_dtype, functional as F, grad_check
from ffkd.backbone import FeaturePyramid
from ffkd.boxes import clip_boxes, cxcywh_to_xywh, decode, decode_boxes, encode, iou, iou_matrix
from ffkd.data import SceneSpec, generate_split
from ffkd.detect import (
    AnchorConfig,
    CBAMFusion,
    DetectionHead,
    DetectionSet,
    Detector,
    ModalityFusion,
    ModelConfig,
    Thresholds,
    detect,
    generate_anchors,
    nms,
    nms_indices,
    postprocess,
    student_config,
    teacher_config,
)
from oracles import brute_force_nms, random_dets


def _sigmoid(x):
    return 1 / (1 + np.exp(-x))


def _conv1x1(x, w, b):
    return np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x) + b[None, :, None, None]


class TestCBAMFusion:
    def test_output_shape_and_gate_ranges(self):
        rng = np.random.default_rng(0)
        fus = CBAMFusion(8, rng=rng)
        r, t = Tensor(rng.normal(size=(2, 8, 6, 6))), Tensor(rng.normal(size=(2, 8, 6, 6)))
        out, ca, sa = fus(r, t)
        assert out.shape == (2, 8, 6, 6)
        assert ca.shape == (2, 16) and sa.shape == (2, 1, 6, 6)
        for g in (ca.data, sa.data):
            assert ((g > 0) & (g < 1)).all()

    def test_saturated_gates_reduce_to_projection(self):
        rng = np.random.default_rng(1)
        fus = CBAMFusion(4, rng=rng)
        fus.b2.data[:] = 40.0
        fus.spatial.bias.data[:] = 40.0
        r, t = rng.normal(size=(2, 4, 5, 5)), rng.normal(size=(2, 4, 5, 5))
        out = fus(Tensor(r), Tensor(t))[0].data
        want = _conv1x1(np.concatenate([r, t], axis=1), fus.project.weight.data,
                        fus.project.bias.data)
        np.testing.assert_allclose(out, want, rtol=1e-5, atol=1e-6)

    def test_thermal_blind_configuration_ignores_thermal(self):
        """Thermal rows of the gate MLP and thermal projection columns zeroed,
        spatial gate saturated: thermal perturbations cannot reach the output."""
        rng = np.random.default_rng(2)
        c = 4
        fus = CBAMFusion(c, rng=rng)
        fus.w1.data[c:] = 0
        fus.spatial.bias.data[:] = 40.0
        fus.project.weight.data[:, c:] = 0
        r = Tensor(rng.normal(size=(1, c, 6, 6)))
        base = fus(r, Tensor(np.zeros((1, c, 6, 6))))[0].data
        for s in range(3):
            t = Tensor(np.random.default_rng(s).normal(scale=5, size=(1, c, 6, 6)))
            np.testing.assert_allclose(fus(r, t)[0].data, base, rtol=1e-6, atol=1e-7)

    def test_zero_thermal_matches_hand_computation(self):
        rng = np.random.default_rng(3)
        c = 4
        fus = CBAMFusion(c, rng=rng)
        r = rng.normal(size=(1, c, 5, 5))
        x = np.concatenate([r, np.zeros_like(r)], axis=1)

        def mlp(v):
            return np.maximum(v @ fus.w1.data + fus.b1.data, 0) @ fus.w2.data + fus.b2.data

        ca = _sigmoid(mlp(x.mean(axis=(2, 3))) + mlp(x.max(axis=(2, 3))))
        xc = x * ca[:, :, None, None]
        desc = np.concatenate([xc.mean(axis=1, keepdims=True), xc.max(axis=1, keepdims=True)], 1)
        sa = _sigmoid(F.conv2d(Tensor(desc), fus.spatial.weight, fus.spatial.bias).data)
        want = _conv1x1(xc * sa, fus.project.weight.data, fus.project.bias.data)
        got = fus(Tensor(r), Tensor(np.zeros_like(r)))[0].data
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-6)

    def test_shape_mismatch(self):
        fus = CBAMFusion(4)
        with pytest.raises(ValueError, match="modality feature shapes differ"):
            fus(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 2, 2))))
        with pytest.raises(ValueError, match="built for 4"):
            fus(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 4))))

    def test_pyramid_level_mismatch(self):
        mf = ModalityFusion(2, 4)
        a = FeaturePyramid([Tensor(np.zeros((1, 4, 4, 4)))] * 2)
        b = FeaturePyramid([Tensor(np.zeros((1, 4, 4, 4)))])
        with pytest.raises(ValueError, match="level counts differ"):
            mf(a, b)

    def test_fused_pyramid_keeps_diagnostics(self):
        # float64 so that strongly activated gates are not rounded onto 1.0
        with default_dtype(np.float64):
            rng = np.random.default_rng(4)
            mf = ModalityFusion(3, 4, rng=rng)
            pyr = FeaturePyramid([Tensor(rng.normal(size=(2, 4, s, s))) for s in (8, 4, 2)])
            fused = mf(pyr, pyr)
        assert len(fused) == 3
        assert [l.shape for l in fused.levels] == pyr.shapes
        assert all(((g > 0) & (g < 1)).all() for g in fused.channel_gates + fused.spatial_gates)

    def test_gradient_check_one_level(self):
        with default_dtype(np.float64):
            rng = np.random.default_rng(0)
            fus = CBAMFusion(8, rng=rng)
            r = Tensor(rng.normal(size=(1, 8, 8, 8)), requires_grad=True)
            t = Tensor(rng.normal(size=(1, 8, 8, 8)), requires_grad=True)
            c = rng.normal(size=(1, 8, 8, 8))
            rep = grad_check(lambda: F.sum(F.mul(fus(r, t)[0], c)), [r, t] + fus.parameters())
        assert rep.passed, rep


class TestAnchors:
    def test_count_at_128(self):
        a = generate_anchors(AnchorConfig(), (128, 128))
        assert len(a) == (16 ** 2 + 8 ** 2 + 4 ** 2) * 3 == 1008
        assert a.level_sizes == (768, 192, 48)

    def test_square_anchor_for_unit_ratio(self):
        a = generate_anchors(AnchorConfig(base_sizes=(32.0,), strides=(32,), ratios=(1.0,)),
                             (64, 64))
        np.testing.assert_allclose(a.boxes[0], [16, 16, 32, 32])
        np.testing.assert_allclose(a.xywh[0], [0, 0, 32, 32])

    def test_ratio_is_height_over_width_with_constant_area(self):
        a = generate_anchors(AnchorConfig(base_sizes=(16.0,), strides=(16,)), (32, 32))
        w, h = a.boxes[:3, 2], a.boxes[:3, 3]
        np.testing.assert_allclose(h / w, [0.5, 1.0, 2.0])
        np.testing.assert_allclose(w * h, 256.0)

    def test_translation_by_one_stride(self):
        cfg = AnchorConfig()
        a = generate_anchors(cfg, (128, 128)).boxes
        k = cfg.per_cell
        grid = a[:768].reshape(16, 16, k, 4)
        np.testing.assert_allclose(grid[:, 1:, :, 0] - grid[:, :-1, :, 0], 8.0)
        np.testing.assert_allclose(grid[1:, :, :, 1] - grid[:-1, :, :, 1], 8.0)
        np.testing.assert_array_equal(grid[:, 1:, :, 1:], grid[:, :-1, :, 1:])

    def test_centres_at_cell_centres(self):
        a = generate_anchors(AnchorConfig(), (128, 128)).boxes
        lvl2 = a[-48:]
        assert set(np.unique(lvl2[:, 0])) == {16.0, 48.0, 80.0, 112.0}

    def test_stride_must_divide(self):
        with pytest.raises(ValueError, match="does not divide"):
            generate_anchors(AnchorConfig(), (100, 128))

    def test_one_base_size_per_level(self):
        with pytest.raises(ValueError):
            AnchorConfig(base_sizes=(8.0, 16.0))

    def test_deterministic(self):
        a = generate_anchors(AnchorConfig(), (64, 96)).boxes
        np.testing.assert_array_equal(a, generate_anchors(AnchorConfig(), (64, 96)).boxes)


class TestHeads:
    def _levels(self, rng, c=4, sizes=(4, 2)):
        return [Tensor(rng.normal(size=(2, c, s, s))) for s in sizes]

    def test_zero_weights_give_uniform_softmax(self):
        head = DetectionHead(4, 3, 3)
        for p in head.parameters():
            p.data[:] = 0
        z_cls, z_reg = head(self._levels(np.random.default_rng(0)))
        assert np.abs(z_cls.data).max() == 0 and np.abs(z_reg.data).max() == 0
        probs = F.softmax(z_cls, axis=-1).data
        np.testing.assert_allclose(probs, 0.25)

    @pytest.mark.parametrize("cfg", [teacher_config(), student_config(),
                                     ModelConfig(image_size=(64, 96))])
    def test_rows_match_anchor_count(self, cfg):
        model = Detector(cfg)
        model.eval()
        h, w = cfg.image_size
        out = model(Tensor(np.zeros((1, 3, h, w))), Tensor(np.zeros((1, 1, h, w))))
        assert out.z_cls.shape == (1, len(model.anchors), cfg.num_classes + 1)
        assert out.z_reg.shape == (1, len(model.anchors), 4)

    def test_row_order_is_level_row_col_ratio(self):
        rng = np.random.default_rng(1)
        head = DetectionHead(4, 3, 3, depth=0, rng=rng)
        levels = self._levels(rng, sizes=(4, 2))
        z_cls, z_reg = head(levels)
        x = levels[1].data
        raw = _conv1x1(x, head.cls_out.weight.data, head.cls_out.bias.data)  # (2, 3*4, 2, 2)
        raw_reg = _conv1x1(x, head.reg_out.weight.data, head.reg_out.bias.data)
        n0 = 4 * 4 * 3
        for row in range(2):
            for col in range(2):
                for k in range(3):
                    idx = n0 + (row * 2 + col) * 3 + k
                    np.testing.assert_allclose(z_cls.data[:, idx], raw[:, k * 4:(k + 1) * 4, row, col],
                                               rtol=1e-5, atol=1e-7)
                    np.testing.assert_allclose(z_reg.data[:, idx],
                                               raw_reg[:, k * 4:(k + 1) * 4, row, col], rtol=1e-5,
                                               atol=1e-7)

    def test_single_weight_set_shared_across_levels(self):
        head = DetectionHead(4, 3, 3, depth=2)
        names = [n for n, _ in head.named_parameters()]
        # two tower layers (dw weight, pw weight, pw bias) plus the two output convs
        assert len(names) == len(set(names)) == 2 * 3 + 4

    def test_gradient_check_both_heads(self):
        with default_dtype(np.float64):
            rng = np.random.default_rng(0)
            head = DetectionHead(3, 3, 2, depth=1, rng=rng)
            levels = [Tensor(rng.normal(size=(1, 3, s, s)), requires_grad=True) for s in (4, 2)]
            n = (16 + 4) * 2
            cc, cr = rng.normal(size=(1, n, 4)), rng.normal(size=(1, n, 4))

            def loss():
                zc, zr = head(levels)
                return F.add(F.sum(F.mul(zc, cc)), F.sum(F.mul(zr, cr)))

            rep = grad_check(loss, levels + head.parameters())
        assert rep.passed, rep


def encode_reference(gt, anchor):
    """Independent anchor-relative encoder, one pair at a time."""
    x, y, w, h = gt
    acx, acy, aw, ah = anchor
    return [(x + w / 2 - acx) / aw, (y + h / 2 - acy) / ah, np.log(w / aw), np.log(h / ah)]


class TestBoxCoding:
    def test_zero_offsets_recover_anchor(self):
        anchors = np.array([[10, 20, 8, 16], [50, 50, 32, 32]], dtype=float)
        np.testing.assert_allclose(decode(np.zeros((2, 4)), anchors), anchors)

    def test_log_two_doubles_width(self):
        out = decode(np.array([0, 0, np.log(2), 0]), np.array([40, 40, 10, 12.0]))
        np.testing.assert_allclose(out, [40, 40, 20, 12])

    def test_log_scale_clamped(self):
        out = decode(np.array([0, 0, 50.0, -50.0]), np.array([0, 0, 1.0, 1.0]))
        np.testing.assert_allclose(out[2:], [np.exp(4), np.exp(-4)])
        assert np.isfinite(out).all()

    def test_encode_matches_reference(self):
        rng = np.random.default_rng(0)
        gts = np.column_stack([rng.uniform(0, 100, (50, 2)), rng.uniform(4, 40, (50, 2))])
        anc = np.column_stack([rng.uniform(0, 128, (50, 2)), rng.uniform(8, 48, (50, 2))])
        want = np.array([encode_reference(g, a) for g, a in zip(gts, anc)])
        np.testing.assert_allclose(encode(gts, anc), want, rtol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 100), st.floats(0, 100), st.floats(2, 60), st.floats(2, 60),
           st.floats(-8, 8), st.floats(-8, 8), st.floats(0.5, 2.0), st.floats(0.5, 2.0))
    def test_decode_inverts_encode(self, x, y, w, h, dx, dy, sw, sh):
        gt = np.array([x, y, w, h])
        anchor = np.array([x + w / 2 + dx, y + h / 2 + dy, w * sw, h * sh])
        assume(iou(gt, cxcywh_to_xywh(anchor)) > 0)
        back = cxcywh_to_xywh(decode(np.array(encode_reference(gt, anchor)), anchor))
        np.testing.assert_allclose(back, gt, atol=1e-4)

    def test_clip_keeps_boxes_in_image(self):
        b = clip_boxes(np.array([[-10, -5, 30, 20], [120, 120, 50, 50], [10, 10, 5, 5]]), 128, 128)
        np.testing.assert_allclose(b, [[0, 0, 20, 15], [120, 120, 8, 8], [10, 10, 5, 5]])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
           st.integers(0, 1007))
    def test_decoded_boxes_within_bounds(self, offsets, k):
        anchors = generate_anchors(AnchorConfig(), (128, 128)).boxes
        b = decode_boxes(np.array(offsets)[None], anchors[k:k + 1], 128, 128)[0]
        x, y, w, h = b
        assert 0 <= x <= 128 and 0 <= y <= 128
        assert 0 <= w and x + w <= 128 + 1e-9 and 0 <= h and y + h <= 128 + 1e-9

    def test_iou_examples(self):
        assert iou([0, 0, 2, 2], [1, 0, 2, 2]) == pytest.approx(1 / 3)
        assert iou([0, 0, 2, 2], [1, 1, 2, 2]) == pytest.approx(1 / 7)
        assert iou([0, 0, 1, 1], [5, 5, 1, 1]) == 0
        assert iou([0, 0, 0, 0], [0, 0, 0, 0]) == 0

    def test_iou_matrix_matches_scalar(self):
        rng = np.random.default_rng(2)
        a = np.column_stack([rng.uniform(0, 20, (6, 2)), rng.uniform(1, 10, (6, 2))])
        b = np.column_stack([rng.uniform(0, 20, (5, 2)), rng.uniform(1, 10, (5, 2))])
        want = np.array([[iou(p, q) for q in b] for p in a])
        np.testing.assert_allclose(iou_matrix(a, b), want, rtol=1e-12)


class TestNMS:
    def test_identical_boxes_keep_higher(self):
        d = DetectionSet([[0, 0, 10, 10]] * 2, [0.8, 0.9], [1, 1], np.zeros((2, 0)))
        out = nms(d, 0.5, 0.0)
        assert len(out) == 1 and out.scores[0] == 0.9

    def test_disjoint_boxes_all_survive(self):
        d = DetectionSet([[0, 0, 10, 10], [20, 0, 10, 10], [40, 40, 5, 5]], [0.9, 0.8, 0.7],
                         [1, 1, 1], np.zeros((3, 0)))
        assert len(nms(d, 0.5, 0.0)) == 3

    def test_different_classes_do_not_suppress(self):
        d = DetectionSet([[0, 0, 10, 10]] * 2, [0.9, 0.8], [1, 2], np.zeros((2, 0)))
        assert len(nms(d, 0.5, 0.0)) == 2

    def test_score_threshold_and_max_dets(self):
        boxes, scores, labels = random_dets(np.random.default_rng(0), 200)
        keep = nms_indices(boxes, scores, labels, 0.5, 0.3, max_dets=10)
        assert len(keep) <= 10 and (scores[keep] >= 0.3).all()

    def test_equal_scores_lower_index_wins(self):
        keep = nms_indices([[0, 0, 10, 10]] * 3, [0.5, 0.5, 0.5], [1, 1, 1], 0.5)
        assert list(keep) == [0]
        keep = nms_indices([[0, 0, 10, 10]] * 3, [0.5, 0.5, 0.5], [1, 1, 1], 0.5,
                           tiebreak=np.array([7, 3, 9]))
        assert list(keep) == [1]

    @pytest.mark.parametrize("thr", [0.0, 1.0, -0.2])
    def test_invalid_iou_threshold(self, thr):
        with pytest.raises(ValueError, match="iou_thresh"):
            nms_indices(np.zeros((1, 4)), [1.0], [1], thr)

    def test_matches_brute_force_on_100_scenes(self):
        rng = np.random.default_rng(42)
        for scene in range(100):
            boxes, scores, labels = random_dets(rng, 200)
            thr = rng.uniform(0.2, 0.8)
            got = nms_indices(boxes, scores, labels, thr)
            assert list(got) == brute_force_nms(boxes, scores, labels, thr), scene

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 120), st.floats(0.1, 0.9))
    def test_output_properties(self, seed, n, thr):
        boxes, scores, labels = random_dets(np.random.default_rng(seed), n)
        keep = nms_indices(boxes, scores, labels, thr)
        assert len(set(keep.tolist())) == len(keep)
        assert (np.diff(scores[keep]) <= 0).all()
        for c in np.unique(labels[keep]):
            kc = keep[labels[keep] == c]
            m = iou_matrix(boxes[kc], boxes[kc])
            np.fill_diagonal(m, 0)
            assert (m <= thr).all()


@pytest.fixture(scope="module")
def frames():
    return [f for f, _ in generate_split(SceneSpec(), "val", 5)]


class TestDetect:
    def test_zero_heads_give_empty_at_half(self, frames):
        model = Detector(student_config())
        for p in (model.head.cls_out.weight, model.head.cls_out.bias):
            p.data[:] = 0
        dets = detect(frames, model, Thresholds(score=0.5))
        assert all(len(d) == 0 for d in dets)

    def test_batch_packing_invariance(self, frames):
        model = Detector(teacher_config(), seed=1)
        thr = Thresholds(score=0.0, max_dets=1000)
        batch = detect(frames, model, thr)
        for f, d in zip(frames, batch):
            alone = detect(f, model, thr)
            assert alone.frame_id == f.frame_id
            # near-equal scores may swap emission order; compare by anchor
            a, b = np.argsort(alone.anchor_idx), np.argsort(d.anchor_idx)
            np.testing.assert_array_equal(alone.anchor_idx[a], d.anchor_idx[b])
            np.testing.assert_allclose(alone.boxes[a], d.boxes[b], atol=1e-5)
            np.testing.assert_allclose(alone.scores[a], d.scores[b], atol=1e-5)

    def test_deterministic(self, frames):
        model = Detector(student_config(), seed=2)
        a = detect(frames, model, Thresholds(score=0.2))
        b = detect(frames, model, Thresholds(score=0.2))
        for u, v in zip(a, b):
            assert u.to_json() == v.to_json()

    def test_adversarial_offsets_are_clipped(self):
        rng = np.random.default_rng(0)
        anchors = generate_anchors(AnchorConfig(), (128, 128)).boxes
        z_cls = rng.normal(scale=3, size=(2, len(anchors), 4))
        z_reg = rng.normal(scale=50, size=(2, len(anchors), 4))
        for d in postprocess(z_cls, z_reg, anchors, (128, 128), Thresholds(score=0.0)):
            x, y, w, h = d.boxes.T
            assert (x >= 0).all() and (y >= 0).all() and (w >= 0).all() and (h >= 0).all()
            assert (x + w <= 128 + 1e-9).all() and (y + h <= 128 + 1e-9).all()

    def test_probabilities_and_scores(self):
        rng = np.random.default_rng(1)
        anchors = generate_anchors(AnchorConfig(), (128, 128)).boxes
        z_cls = rng.normal(scale=4, size=(1, len(anchors), 4))
        d = postprocess(z_cls, np.zeros((1, len(anchors), 4)), anchors, (128, 128),
                        Thresholds(score=0.3))[0]
        assert len(d) > 0
        assert (d.probs >= 0).all()
        np.testing.assert_allclose(d.probs.sum(axis=1), 1, atol=1e-6)
        np.testing.assert_allclose(d.scores, d.probs[:, 1:].max(axis=1))
        np.testing.assert_array_equal(d.labels, d.probs[:, 1:].argmax(axis=1) + 1)

    def test_json_round_trip(self):
        d = DetectionSet([[1, 2, 3, 4]], [0.7], [2], [[0.1, 0.1, 0.7, 0.1]], frame_id="val_00001")
        back = DetectionSet.from_json(d.to_json())
        assert back.frame_id == "val_00001"
        np.testing.assert_allclose(back.boxes, d.boxes)
        np.testing.assert_allclose(back.probs, d.probs)
        assert list(back.labels) == [2]
        empty = DetectionSet.from_json('{"frame_id": "x", "detections": []}')
        assert len(empty) == 0

    @pytest.mark.parametrize("modality", ["rgb", "thermal"])
    def test_single_modality_models_ignore_other_input(self, frames, modality):
        model = Detector(student_config(modality))
        model.eval()
        rgb = Tensor(np.stack([f.rgb for f in frames[:2]]).transpose(0, 3, 1, 2) / 255.0)
        thm = Tensor(np.stack([f.thm for f in frames[:2]])[:, None] / 255.0)
        base = model(rgb, thm).z_cls.data
        if modality == "rgb":
            other = model(rgb, Tensor(np.zeros_like(thm.data))).z_cls.data
        else:
            other = model(Tensor(np.zeros_like(rgb.data)), thm).z_cls.data
        np.testing.assert_array_equal(base, other)

    def test_invalid_modality(self):
        with pytest.raises(ValueError, match="modality"):
            ModelConfig(modality="depth")
