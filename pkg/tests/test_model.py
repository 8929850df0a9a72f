import numpy as np
import pytest

import pivdet.fusion
from pivdet.autodiff import backward
from pivdet.model import (Detector, desk_config, fit_pca_on_scenes,
                          paper_scale_config, zero_spectra)
from pivdet.scene import ObjectClassSpec, SynthConfig, synth_scene
from pivdet.trainer import (AdamWState, TrainConfig, adamw_step,
                            checkpoint_tensors, load_archive, save_archive,
                            train)


def tiny_config(**kw):
    from pivdet.preprocess import GridRange
    cfg = desk_config(num_classes=2)
    cfg.grid = GridRange(-6.4, 6.4, -6.4, 6.4, 0.0, 3.2, 0.4, 0.4)
    cfg.channels = (4, 8, 8, 8)
    cfg.attention_heads = 2
    cfg.head_mid_channels = 8
    cfg.num_bands = 8
    cfg.pca_components = 4
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def tiny_synth():
    return SynthConfig(
        extent=12.8, num_bands=8, ground_density=1.5, object_density=12.0,
        side_density=3.0, canopy_count=1, canopy_radius=(1.5, 2.5),
        canopy_density=4.0, canopy_base=(2.0, 2.6),
        classes=[ObjectClassSpec("vehicle", size=(3.0, 1.6, 1.4), count=2,
                                 prototype=2, yaw_mode="axis"),
                 ObjectClassSpec("crate", size=(1.6, 1.6, 1.0), count=2,
                                 prototype=4, yaw_mode="axis")])


@pytest.fixture(scope="module")
def scene_and_pca():
    scene = synth_scene(tiny_synth(), 7)
    pca = fit_pca_on_scenes([scene], 4)
    return scene, pca


def test_forward_shapes_and_determinism(scene_and_pca):
    scene, pca = scene_and_pca
    det = Detector(tiny_config())
    sample = det.preprocess_scene(scene, pca)
    h8, w8 = det.config.bev_hw
    out1 = det.forward(sample, det.store.leaves())
    out2 = det.forward(sample, det.store.leaves())
    assert out1["fbev"].value.shape == (h8, w8, 2 * det.config.bev_channels)
    assert np.array_equal(out1["cls"].value, out2["cls"].value)
    assert np.array_equal(out1["box"].value, out2["box"].value)
    a = det.anchors
    assert out1["cls"].value.shape == (a.num_anchors, 2)


def test_bev_maps_same_shape_both_branches(scene_and_pca):
    scene, pca = scene_and_pca
    det = Detector(tiny_config())
    sample = det.preprocess_scene(scene, pca)
    collect: dict = {}
    det.forward(sample, det.store.leaves(), collect=collect)
    h8, w8 = det.config.bev_hw
    assert collect["fbev"].shape == (h8, w8, 2 * det.config.bev_channels)


def test_sff_off_equals_empty_association(scene_and_pca, monkeypatch):
    scene, pca = scene_and_pca
    det_on = Detector(tiny_config(use_sff=True))
    det_off = Detector(tiny_config(use_sff=False))
    det_off.store.load_state(det_on.store.state())
    sample = det_on.preprocess_scene(scene, pca)

    import pivdet.model as model_mod
    empty = pivdet.fusion.AssociationMap(np.zeros(0, np.int64),
                                         np.zeros(0, np.int64))
    monkeypatch.setattr(model_mod, "build_association",
                        lambda *a, **k: empty)
    out_on = det_on.forward(sample, det_on.store.leaves())
    out_off = det_off.forward(sample, det_off.store.leaves())
    assert np.array_equal(out_on["cls"].value, out_off["cls"].value)
    assert np.array_equal(out_on["box"].value, out_off["box"].value)


def test_multiscale_off_equals_zeroed_extra_scales(scene_and_pca):
    scene, pca = scene_and_pca
    det_on = Detector(tiny_config(use_multiscale=True))
    det_off = Detector(tiny_config(use_multiscale=False))
    shared = {n: v for n, v in det_on.store.state().items()
              if not n.startswith(("voxel.stage5", "voxel.stage6"))}
    det_off.store.load_state(shared)
    # zero the deeper scales: their features become exactly zero, so the
    # aggregation adds exact zeros
    for n in det_on.store.names():
        if n.startswith(("voxel.stage5", "voxel.stage6")):
            det_on.store.set(n, np.zeros_like(det_on.store.get(n)))
    sample = det_on.preprocess_scene(scene, pca)
    out_on = det_on.forward(sample, det_on.store.leaves())
    out_off = det_off.forward(sample, det_off.store.leaves())
    assert np.array_equal(out_on["cls"].value, out_off["cls"].value)


def test_weighted_compression_off_equals_zero_z(scene_and_pca):
    scene, pca = scene_and_pca
    det_on = Detector(tiny_config(use_weighted_compression=True))
    det_off = Detector(tiny_config(use_weighted_compression=False))
    shared = {n: v for n, v in det_on.store.state().items()
              if n != "voxel.elevation.z"}
    det_off.store.load_state(shared)
    sample = det_on.preprocess_scene(scene, pca)
    out_on = det_on.forward(sample, det_on.store.leaves())
    out_off = det_off.forward(sample, det_off.store.leaves())
    # z initializes to zeros -> uniform weights == plain vertical sum
    assert np.array_equal(out_on["cls"].value, out_off["cls"].value)


def test_pillar_off_ignores_spectra(scene_and_pca):
    scene, pca = scene_and_pca
    det = Detector(tiny_config(use_pillar_branch=False))
    s1 = det.preprocess_scene(scene, pca)
    s2 = det.preprocess_scene(zero_spectra(scene), pca)
    out1 = det.forward(s1, det.store.leaves())
    out2 = det.forward(s2, det.store.leaves())
    assert np.array_equal(out1["cls"].value, out2["cls"].value)
    assert np.array_equal(out1["box"].value, out2["box"].value)


def test_patchwise_off_concat_fallback(scene_and_pca):
    scene, pca = scene_and_pca
    det = Detector(tiny_config(use_patchwise=False))
    sample = det.preprocess_scene(scene, pca)
    out = det.forward(sample, det.store.leaves())
    h8, w8 = det.config.bev_hw
    assert out["fbev"].value.shape == (h8, w8, 2 * det.config.bev_channels)


def test_concat_compression_ablation_runs(scene_and_pca):
    scene, pca = scene_and_pca
    det = Detector(tiny_config(use_concat_compression=True))
    sample = det.preprocess_scene(scene, pca)
    out = det.forward(sample, det.store.leaves())
    assert np.isfinite(out["cls"].value).all()


def test_paper_scale_config_arithmetic():
    cfg = paper_scale_config()
    assert cfg.grid.grid_xy == (512, 512)
    assert cfg.bev_hw == (64, 64)
    assert cfg.grid.grid_z == 160
    assert cfg.depth8 == 20
    assert cfg.pca_components == 21


def test_loss_backward_touches_all_trainables(scene_and_pca):
    scene, pca = scene_and_pca
    det = Detector(tiny_config())
    sample = det.preprocess_scene(scene, pca)
    leaves = det.store.leaves()
    losses = det.loss(sample, leaves)
    backward(losses["total"])
    det.store.accumulate(leaves)
    touched = sum(float(np.abs(det.store.grad(n)).sum()) > 0
                  for n in det.store.names())
    # nearly every parameter should receive gradient signal
    assert touched >= 0.8 * len(det.store.names())


# ------------------------------------------------------------ training loop

def build_samples(det, n_scenes=2, seed0=0):
    scenes = [synth_scene(tiny_synth(), seed0 + i) for i in range(n_scenes)]
    pca = fit_pca_on_scenes(scenes, det.config.pca_components)
    return [det.preprocess_scene(s, pca) for s in scenes], pca


def test_train_two_runs_identical_checkpoints(tmp_path):
    results = []
    for run in range(2):
        det = Detector(tiny_config())
        samples, pca = build_samples(det)
        cfgt = TrainConfig(lr=0.001, onecycle_peak=0.01, steps=3,
                           batch_size=2, epochs=1)
        path = tmp_path / f"run{run}.ntar"
        train(det, samples, cfgt, pca=pca, checkpoint_path=path)
        results.append(path.read_bytes())
    assert results[0] == results[1]


def test_train_resume_reproduces_uninterrupted(tmp_path):
    det_a = Detector(tiny_config())
    samples, pca = build_samples(det_a)
    full = TrainConfig(lr=0.001, onecycle_peak=0.01, steps=4, batch_size=2,
                       epochs=1)
    path_a = tmp_path / "full.ntar"
    train(det_a, samples, full, pca=pca, checkpoint_path=path_a)

    det_b = Detector(tiny_config())
    samples_b, pca_b = build_samples(det_b)
    path_half = tmp_path / "half.ntar"
    # same 4-step schedule, interrupted after 2 steps
    train(det_b, samples_b, full, pca=pca_b, checkpoint_path=path_half,
          halt_at=2)

    det_c = Detector(tiny_config())
    samples_c, _ = build_samples(det_c)
    path_c = tmp_path / "resumed.ntar"
    train(det_c, samples_c, full, pca=pca_b, checkpoint_path=path_c,
          resume_from=path_half)

    ta, _, _ = load_archive(path_a)
    tc_, _, _ = load_archive(path_c)
    for name in ta:
        assert np.array_equal(ta[name], tc_[name]), name


def test_adamw_zero_lr_leaves_params():
    from pivdet.autodiff import ParamStore
    store = ParamStore()
    store.add("w", np.array([1.5], dtype=np.float32))
    store._params["w"]["grad"][...] = 3.0
    adamw_step(store, AdamWState(), lr=0.0, weight_decay=0.01)
    assert store.get("w")[0] == 1.5


def test_train_log_csv_format():
    det = Detector(tiny_config())
    samples, pca = build_samples(det)
    res = train(det, samples, TrainConfig(lr=0.001, onecycle_peak=0.01,
                                          steps=2, batch_size=2, epochs=1))
    csv = res.log_csv()
    lines = csv.strip().splitlines()
    assert lines[0] == "step,lr,cls,reg,dir,total"
    assert len(lines) == 3


def test_normalize_features_ranges(scene_and_pca):
    from pivdet.model import normalize_features
    scene, pca = scene_and_pca
    det = Detector(tiny_config())
    sample = det.preprocess_scene(scene, pca)
    pf, vf = normalize_features(det.config, sample.pillar_feats,
                                sample.voxel_feats)
    assert np.abs(pf[:, :3]).max() <= 1.0 + 1e-6
    assert np.abs(vf).max() <= 1.0 + 1e-6
    # offsets are in cell units now, bounded by one cell diagonal
    assert np.abs(pf[:, 6:8]).max() <= 0.5 + 1e-6
    # spectra channels pass through untouched
    assert np.array_equal(pf[:, 9:], sample.pillar_feats[:, 9:].astype(np.float32))


def test_sff_stage_flag_changes_params():
    cfg1 = tiny_config()
    cfg1.channels = (4, 8, 8, 8)
    det1 = Detector(cfg1)
    cfg2 = tiny_config()
    cfg2.sff_stages = (1, 2, 3, 4)
    cfg2.channels = (4, 8, 8, 8)
    det2 = Detector(cfg2)
    # equal widths mean no extra projection params in either case
    assert set(det1.store.names()) == set(det2.store.names())
