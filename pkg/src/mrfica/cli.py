"""Command-line front end for the fingerprinting toolkit.

Every command is config-driven (YAML, strict keys) with flag
overrides, writes deterministic CSV/binary artifacts plus the fully
resolved configuration into its output directory, and keeps wall-clock
information out of the CSVs (a separate ``run.log`` carries timings).

Exit codes: 0 success, 1 check failure, 2 configuration error,
3 input/output error, 4 training divergence.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from mrfica import autodiff, dictgen, epg, matcher, metrics, model, phantom
from mrfica import kernels
from mrfica.config import (ConfigError, dump_config, load_config,
                           validate_config)
from mrfica.errors import (DomainError, FormatError, MrfError,
                           TrainingDivergedError)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

FULL_SCALE_T_POINTS = 2000


def _log(out_dir, message):
    os.makedirs(out_dir, exist_ok=True)
    stamp = time.strftime("%Y-%m-%d %H:%M:%S")
    with open(os.path.join(out_dir, "run.log"), "a", encoding="ascii") as fh:
        fh.write(f"[{stamp}] {message}\n")
    print(message)


def _resolve(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    if getattr(args, "svd_rank", None) is not None:
        cfg.svd_rank = args.svd_rank
    if getattr(args, "patch", None) is not None:
        cfg.model.patch = args.patch
    if getattr(args, "stride", None) is not None:
        cfg.model.stride = args.stride
    if getattr(args, "select", None) is not None:
        cfg.select.method = args.select
    if getattr(args, "n_channels", None) is not None:
        cfg.select.n_channels = args.n_channels
    if getattr(args, "folds", None) is not None:
        cfg.folds = args.folds
    if getattr(args, "noise", None) is not None:
        cfg.phantom.noise_sigma = args.noise
    if getattr(args, "full_scale", False):
        cfg.full_scale = True
        cfg.sequence.t_points = FULL_SCALE_T_POINTS
        cfg.grid.step_factor = 1
    threads = getattr(args, "threads", None)
    if threads is None:
        threads = os.environ.get("MRF_THREADS")
        threads = int(threads) if threads else None
    if threads is not None:
        cfg.threads = threads
    return validate_config(cfg)


def _sequence(cfg):
    if cfg.sequence.flip_train_path:
        flips = epg.load_flip_train(cfg.sequence.flip_train_path)
    else:
        flips = epg.default_flip_train(cfg.sequence.t_points,
                                       cfg.sequence.flip_seed)
    return epg.SequenceParams(flip_train=flips, tr_ms=cfg.sequence.tr_ms,
                              te_ms=cfg.sequence.te_ms)


def _grid_spec(cfg):
    if cfg.grid.step_factor == 1:
        return dictgen.GridSpec.full_scale()
    return dictgen.GridSpec.desk_scale(cfg.grid.step_factor)


def _make_phantom(cfg, seed, spec):
    ph = phantom.generate_phantom(cfg.phantom.width, cfg.phantom.height,
                                  seed)
    if cfg.phantom.snap_to_grid:
        ph = phantom.snap_to_grid(ph, spec.t1_values(), spec.t2_values())
    return ph


def _prepare_out(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    dump_config(cfg, os.path.join(cfg.out_dir, "config_resolved.yaml"))


# --- commands ----------------------------------------------------------


def cmd_gen_dict(args):
    cfg = _resolve(args)
    _prepare_out(cfg)
    seq = _sequence(cfg)
    spec = _grid_spec(cfg)
    pairs, report = dictgen.expand_grid_with_report(
        spec, drop_zero=cfg.grid.drop_zero,
        drop_t2_above_t1=cfg.grid.drop_t2_above_t1)
    t0 = time.time()
    d = dictgen.build_dictionary(seq, pairs, parallel=cfg.threads > 1,
                                 threads=cfg.threads,
                                 report=report.as_dict())
    path = os.path.join(cfg.out_dir, "dictionary.mrfd")
    dictgen.save_dictionary(d, path)
    dictgen.export_params_csv(d, os.path.join(cfg.out_dir,
                                              "dictionary_index.csv"))
    epg.save_flip_train(os.path.join(cfg.out_dir, "flip_train.csv"),
                        seq.flip_train)
    with open(os.path.join(cfg.out_dir, "grid_report.json"), "w",
              encoding="ascii") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _log(cfg.out_dir, f"dictionary: {d.n_entries} entries x {d.t_points} "
                      f"points in {time.time() - t0:.1f}s -> {path}")
    if cfg.svd_rank > 0:
        cd = dictgen.compress_svd(d, cfg.svd_rank)
        cpath = os.path.join(cfg.out_dir,
                             f"dictionary_rank{cfg.svd_rank}.mrfd")
        dictgen.save_dictionary(cd, cpath)
        _log(cfg.out_dir, f"compressed rank {cd.rank}: energy fraction "
                          f"{cd.energy_fraction:.6f} -> {cpath}")
    return EXIT_OK


def cmd_phantom(args):
    cfg = _resolve(args)
    _prepare_out(cfg)
    seq = _sequence(cfg)
    spec = _grid_spec(cfg)
    ph = _make_phantom(cfg, cfg.phantom.seed, spec)
    img = phantom.synthesize_image(ph, seq,
                                   noise_sigma=cfg.phantom.noise_sigma,
                                   seed=cfg.seed)
    phantom.save_phantom(ph, cfg.out_dir)
    phantom.save_image_mrfi(os.path.join(cfg.out_dir, "image.mrfi"), img)
    _log(cfg.out_dir,
         f"phantom {ph.width}x{ph.height} (fg {int(ph.foreground.sum())} "
         f"px), image T={img.t_points}, noise {cfg.phantom.noise_sigma}")
    return EXIT_OK


def _evaluate_maps(out_dir, ph, maps, label):
    rep = metrics.region_report(ph, maps)
    metrics.write_region_report_csv(
        rep, os.path.join(out_dir, f"{label}_regions.csv"))
    row = rep.row("skull_stripped")
    metrics.write_mae_csv(os.path.join(out_dir, f"{label}_mae.csv"),
                          [("skull_stripped", row.t1_mae_pct,
                            row.t2_mae_pct)])
    fg = ph.foreground
    metrics.save_error_map(ph.t1_map, maps.t1_map, fg,
                           os.path.join(out_dir, f"{label}_t1_error.mrfm"),
                           os.path.join(out_dir, f"{label}_t1_error.pgm"))
    metrics.save_error_map(ph.t2_map, maps.t2_map, fg,
                           os.path.join(out_dir, f"{label}_t2_error.mrfm"),
                           os.path.join(out_dir, f"{label}_t2_error.pgm"))
    return row


def cmd_match(args):
    cfg = _resolve(args)
    _prepare_out(cfg)
    d = dictgen.load_dictionary(args.dict)
    img = phantom.load_image_mrfi(args.image)
    t0 = time.time()
    maps = matcher.reconstruct_maps(d, img)
    metrics.save_tissue_maps(maps, cfg.out_dir, "matched")
    _log(cfg.out_dir, f"matched {int(maps.mask.sum())} pixels in "
                      f"{time.time() - t0:.1f}s "
                      f"({maps.degenerate_pixels} degenerate)")
    if args.phantom:
        ph = phantom.load_phantom(args.phantom)
        row = _evaluate_maps(cfg.out_dir, ph, maps, "matched")
        _log(cfg.out_dir, f"skull-stripped MAE%: T1 {row.t1_mae_pct:.4f} "
                          f"T2 {row.t2_mae_pct:.4f}")
    return EXIT_OK


def _reduction_from_args(cfg, args, images, phantoms):
    """Build the channel-reduction description for training."""
    n = cfg.select.n_channels
    if not getattr(args, "reduce", False) or n <= 0:
        return None
    method = cfg.select.method
    if method == "random":
        t = images[0].t_points
        idx = model.select_channels_random(t, n, cfg.seed)
        return {"method": "random", "indices": [int(i) for i in idx]}
    if method == "attention":
        if not getattr(args, "scores", None):
            raise ConfigError("attention reduction needs --scores CSV "
                              "(from select-channels)")
        scores = _read_scores_csv(args.scores)
        idx = model.select_channels_attention(scores, n)
        return {"method": "attention", "indices": [int(i) for i in idx]}
    # pca: fit on the training phantoms' foreground pixels
    sig = np.concatenate([img.data[ph.foreground]
                          for img, ph in zip(images, phantoms)], axis=0)
    basis, _ = model.pca_reduce(sig, n)
    return {"method": "pca", "mean": basis.mean.tolist(),
            "components": basis.components.tolist()}


def _read_scores_csv(path):
    scores = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline()
        if not header.startswith("channel,"):
            raise FormatError(f"{path}: expected attention-score CSV")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) == 2:
                scores.append(float(parts[1]))
    if not scores:
        raise FormatError(f"{path}: no scores")
    return np.array(scores)


def _write_history_csv(path, history):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for e in history.epochs:
            fh.write(f"{e.epoch},{e.train_loss:.9f},{e.val_loss:.9f}\n")


def cmd_train(args):
    cfg = _resolve(args)
    _prepare_out(cfg)
    seq = _sequence(cfg)
    spec = _grid_spec(cfg)

    seeds = [cfg.phantom.seed + k for k in range(max(1, cfg.folds))]
    phantoms = [_make_phantom(cfg, s, spec) for s in seeds]
    images = [phantom.synthesize_image(ph, seq,
                                       noise_sigma=cfg.phantom.noise_sigma,
                                       seed=cfg.seed + i)
              for i, ph in enumerate(phantoms)]

    if cfg.folds > 1:
        train_ph, train_im = phantoms[:-1], images[:-1]
        val_ph, val_im = phantoms[-1:], images[-1:]
    else:
        train_ph, train_im = phantoms, images
        val_ph, val_im = [], []

    reduction = _reduction_from_args(cfg, args, train_im, train_ph)
    red_imgs = [model.apply_reduction(im, reduction) for im in train_im]
    red_val = [model.apply_reduction(im, reduction) for im in val_im]

    def patchsets(imgs, phs):
        return [model.extract_patches(im, ph, patch=cfg.model.patch,
                                      stride=cfg.model.stride)
                for im, ph in zip(imgs, phs)]

    train_sets = patchsets(red_imgs, train_ph)
    trainset = _concat_patchsets(train_sets)
    if red_val:
        valset = _concat_patchsets(patchsets(red_val, val_ph))
    else:
        trainset, valset = model.split_patchset(
            trainset, val_fraction=cfg.train.val_fraction, seed=cfg.seed)

    channels = trainset.channels
    net = model.build_conv_ica(channels, cfg.model.patch,
                               ratio=cfg.model.ratio, seed=cfg.seed)
    tc = model.TrainConfig(lr=cfg.train.lr, batch=cfg.train.batch,
                           max_epochs=cfg.train.max_epochs,
                           patience=cfg.train.patience, seed=cfg.seed)
    t0 = time.time()
    history = model.train(net, trainset, valset, tc)
    ckpt = os.path.join(cfg.out_dir, "model.mrfw")
    sidecar = os.path.join(cfg.out_dir, "model.json")
    model.save_model(net, ckpt, sidecar, reduction=reduction)
    _write_history_csv(os.path.join(cfg.out_dir, "history.csv"), history)
    _log(cfg.out_dir,
         f"trained C={channels} patch={cfg.model.patch} on "
         f"{len(trainset)} patches, best val "
         f"{history.best_val_loss:.6f} @ epoch {history.best_epoch} "
         f"({time.time() - t0:.1f}s) -> {ckpt}")
    return EXIT_OK


def _concat_patchsets(sets):
    return model.PatchSet(
        patches=np.concatenate([s.patches for s in sets], axis=0),
        targets=np.concatenate([s.targets for s in sets], axis=0),
        anchors=np.concatenate([s.anchors for s in sets], axis=0))


def cmd_predict(args):
    cfg = _resolve(args)
    _prepare_out(cfg)
    sidecar = args.sidecar or args.checkpoint.rsplit(".", 1)[0] + ".json"
    net, reduction = model.load_model(args.checkpoint, sidecar)
    img = phantom.load_image_mrfi(args.image)
    data = model.apply_reduction(img, reduction)
    t0 = time.time()
    maps = model.predict_maps(net, data, stride=cfg.model.stride)
    metrics.save_tissue_maps(maps, cfg.out_dir, "predicted")
    _log(cfg.out_dir, f"predicted {int(maps.mask.sum())} pixels in "
                      f"{time.time() - t0:.1f}s")
    if args.phantom:
        ph = phantom.load_phantom(args.phantom)
        row = _evaluate_maps(cfg.out_dir, ph, maps, "predicted")
        _log(cfg.out_dir, f"skull-stripped MAE%: T1 {row.t1_mae_pct:.4f} "
                          f"T2 {row.t2_mae_pct:.4f}")
    return EXIT_OK


def cmd_select_channels(args):
    cfg = _resolve(args)
    _prepare_out(cfg)
    n = cfg.select.n_channels
    method = cfg.select.method
    if method == "attention":
        if not args.checkpoint or not args.image:
            raise ConfigError("attention selection needs --checkpoint and "
                              "--image")
        sidecar = args.sidecar or args.checkpoint.rsplit(".", 1)[0] + ".json"
        net, reduction = model.load_model(args.checkpoint, sidecar)
        img = phantom.load_image_mrfi(args.image)
        data = model.apply_reduction(img, reduction)
        patches, _, _ = model.extract_image_patches(data, patch=net.patch,
                                                    stride=cfg.model.stride)
        scores = model.mean_attention_scores(net, patches)
        model.save_attention_scores_csv(
            os.path.join(cfg.out_dir, "attention_scores.csv"), scores)
        idx = model.select_channels_attention(scores, n)
        model.save_selected_channels_csv(
            os.path.join(cfg.out_dir, "selected_channels.csv"), idx)
        _log(cfg.out_dir, f"attention selection: {n} of {scores.size} "
                          f"channels")
    elif method == "random":
        if not args.image:
            raise ConfigError("random selection needs --image for the "
                              "channel count")
        img = phantom.load_image_mrfi(args.image)
        idx = model.select_channels_random(img.t_points, n, cfg.seed)
        model.save_selected_channels_csv(
            os.path.join(cfg.out_dir, "selected_channels.csv"), idx)
        _log(cfg.out_dir, f"random selection: {n} of {img.t_points} "
                          f"channels (seed {cfg.seed})")
    else:
        if not args.image:
            raise ConfigError("pca reduction needs --image")
        img = phantom.load_image_mrfi(args.image)
        fg = np.linalg.norm(img.data.astype(np.float64), axis=2) \
            >= model.SIGNAL_EPS
        basis, _ = model.pca_reduce(img.data[fg], n)
        with open(os.path.join(cfg.out_dir, "pca_reduction.json"), "w",
                  encoding="ascii") as fh:
            json.dump({"method": "pca", "mean": basis.mean.tolist(),
                       "components": basis.components.tolist()}, fh)
            fh.write("\n")
        with open(os.path.join(cfg.out_dir, "pca_variance.csv"), "w",
                  encoding="ascii") as fh:
            fh.write("component,variance_fraction\n")
            for i, v in enumerate(basis.variance_fractions):
                fh.write(f"{i},{v:.9f}\n")
        _log(cfg.out_dir, f"pca reduction to {n} components")
    return EXIT_OK


# --- sweep ---------------------------------------------------------------


def _train_eval(cfg, channels, patch, trainset, valset, test_data, test_ph,
                seed):
    net = model.build_conv_ica(channels, patch, ratio=cfg.model.ratio,
                               seed=seed)
    tc = model.TrainConfig(lr=cfg.train.lr, batch=cfg.train.batch,
                           max_epochs=cfg.train.max_epochs,
                           patience=cfg.train.patience, seed=seed)
    model.train(net, trainset, valset, tc)
    maps = model.predict_maps(net, test_data, stride=cfg.model.stride)
    rep = metrics.region_report(test_ph, maps)
    row = rep.row("skull_stripped")
    return net, row.t1_mae_pct, row.t2_mae_pct


def _fold_data(cfg, seq, spec):
    folds = max(2, cfg.folds)
    seeds = [cfg.phantom.seed + k for k in range(folds)]
    phs = [_make_phantom(cfg, s, spec) for s in seeds]
    imgs = [phantom.synthesize_image(ph, seq,
                                     noise_sigma=cfg.phantom.noise_sigma,
                                     seed=cfg.seed + i)
            for i, ph in enumerate(phs)]
    return phs, imgs


def _reduced_sets(cfg, method, n, train_ph, train_im, test_im, scores,
                  seed, patch):
    """Reduce train/test images per ``method`` and cut patches."""
    if method == "attention":
        idx = model.select_channels_attention(scores, n)
        red_train = [model.select_image_channels(im, idx)
                     for im in train_im]
        red_test = model.select_image_channels(test_im, idx)
    elif method == "random":
        idx = model.select_channels_random(train_im[0].t_points, n, seed)
        red_train = [model.select_image_channels(im, idx)
                     for im in train_im]
        red_test = model.select_image_channels(test_im, idx)
    else:
        sig = np.concatenate([im.data[ph.foreground]
                              for im, ph in zip(train_im, train_ph)], axis=0)
        basis, _ = model.pca_reduce(sig, n)
        red_train = [model.pca_transform_image(im, basis)
                     for im in train_im]
        red_test = model.pca_transform_image(test_im, basis)
    sets = [model.extract_patches(im, ph, patch=patch,
                                  stride=cfg.model.stride)
            for im, ph in zip(red_train, train_ph)]
    return _concat_patchsets(sets), red_test


def _fold_attention_scores(cfg, train_ph, train_im, patch, seed):
    """Mean attention scores from a full-channel model trained on the
    fold's training phantoms."""
    sets = [model.extract_patches(im, ph, patch=patch,
                                  stride=cfg.model.stride)
            for im, ph in zip(train_im, train_ph)]
    full = _concat_patchsets(sets)
    tr, va = model.split_patchset(full, cfg.train.val_fraction, seed)
    net = model.build_conv_ica(full.channels, patch, ratio=cfg.model.ratio,
                               seed=seed)
    tc = model.TrainConfig(lr=cfg.train.lr, batch=cfg.train.batch,
                           max_epochs=cfg.train.max_epochs,
                           patience=cfg.train.patience, seed=seed)
    model.train(net, tr, va, tc)
    return model.mean_attention_scores(net, full)


def cmd_sweep(args):
    cfg = _resolve(args)
    _prepare_out(cfg)
    seq = _sequence(cfg)
    spec = _grid_spec(cfg)
    phs, imgs = _fold_data(cfg, seq, spec)
    folds = len(phs)
    axis = args.axis

    detail = []

    def run_fold(fold, method, n, patch):
        test_ph, test_im = phs[fold], imgs[fold]
        train_ph = [p for k, p in enumerate(phs) if k != fold]
        train_im = [im for k, im in enumerate(imgs) if k != fold]
        seed = cfg.seed + fold
        scores = None
        if method == "attention":
            scores = _fold_attention_scores(cfg, train_ph, train_im,
                                            cfg.model.patch, seed)
        trainset, red_test = _reduced_sets(cfg, method, n, train_ph,
                                           train_im, test_im, scores, seed,
                                           patch)
        tr, va = model.split_patchset(trainset, cfg.train.val_fraction,
                                      seed)
        _, m1, m2 = _train_eval(cfg, n, patch, tr, va, red_test, test_ph,
                                seed)
        return m1, m2

    rows = []
    if axis == "channels":
        for method in cfg.sweep.methods:
            for n in cfg.sweep.channel_counts:
                m1s, m2s = [], []
                for fold in range(folds):
                    m1, m2 = run_fold(fold, method, n, cfg.model.patch)
                    detail.append((f"{method}/{n}", fold, m1, m2))
                    m1s.append(m1)
                    m2s.append(m2)
                rows.append((f"{method}/{n}", float(np.mean(m1s)),
                             float(np.mean(m2s))))
                _log(cfg.out_dir, f"sweep {method}/{n}: "
                                  f"T1 {rows[-1][1]:.4f} T2 "
                                  f"{rows[-1][2]:.4f}")
    elif axis == "patch":
        method = cfg.select.method
        n = cfg.select.n_channels
        for patch in cfg.sweep.patch_sizes:
            m1s, m2s = [], []
            for fold in range(folds):
                m1, m2 = run_fold(fold, method, n, patch)
                detail.append((f"{patch}x{patch}", fold, m1, m2))
                m1s.append(m1)
                m2s.append(m2)
            rows.append((f"{patch}x{patch}", float(np.mean(m1s)),
                         float(np.mean(m2s))))
            _log(cfg.out_dir, f"sweep patch {patch}: T1 {rows[-1][1]:.4f} "
                              f"T2 {rows[-1][2]:.4f}")
    elif axis == "method":
        n = cfg.select.n_channels
        for method in cfg.sweep.methods:
            m1s, m2s = [], []
            for fold in range(folds):
                m1, m2 = run_fold(fold, method, n, cfg.model.patch)
                detail.append((f"{method}/{n}", fold, m1, m2))
                m1s.append(m1)
                m2s.append(m2)
            rows.append((f"{method}/{n}", float(np.mean(m1s)),
                         float(np.mean(m2s))))
            _log(cfg.out_dir, f"sweep {method}: T1 {rows[-1][1]:.4f} "
                              f"T2 {rows[-1][2]:.4f}")
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")

    metrics.write_mae_csv(os.path.join(cfg.out_dir, "sweep_results.csv"),
                          rows)
    with open(os.path.join(cfg.out_dir, "sweep_detail.csv"), "w",
              encoding="ascii") as fh:
        fh.write("label,fold,t1_mae_pct,t2_mae_pct\n")
        for label, fold, m1, m2 in detail:
            fh.write(f"{label},{fold},{m1:.6f},{m2:.6f}\n")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _resolve(args)
    _prepare_out(cfg)
    rng = np.random.default_rng(cfg.seed)
    net = model.build_conv_ica(8, 4, seed=cfg.seed + 3)
    feeds = {"x": rng.uniform(0.0, 1.0, (4, 4, 4, 8)).astype(np.float32),
             "target": rng.uniform(0.1, 0.9, (4, 2)).astype(np.float32)}
    # small epsilon keeps the finite-difference sweep away from relu
    # kinks; the shadow pass is float64 so roundoff stays negligible
    report = autodiff.gradient_check(net.graph, feeds, net.loss_node,
                                     tolerance=1e-4, epsilon=1e-6,
                                     max_coords=2000, seed=cfg.seed)
    for tc in report.tensors:
        _log(cfg.out_dir, f"gradcheck {tc.name}: max_rel "
                          f"{tc.max_rel_error:.3e} ({tc.checked} coords)")
    verdict = "PASS" if report.passed else "FAIL"
    _log(cfg.out_dir, f"gradcheck overall: {verdict} "
                      f"(max rel {report.max_rel_error:.3e}, tolerance "
                      f"{report.tolerance})")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_bench(args):
    cfg = _resolve(args)
    _prepare_out(cfg)
    if args.dict:
        d = dictgen.load_dictionary(args.dict)
        if isinstance(d, dictgen.CompressedDictionary):
            raise ConfigError("bench needs a raw dictionary")
    else:
        rng = np.random.default_rng(cfg.seed)
        signals = rng.random((args.entries, args.t_points),
                             dtype=np.float32)
        norms = np.linalg.norm(signals.astype(np.float64), axis=1)
        params = np.stack([rng.uniform(100, 4000, args.entries),
                           rng.uniform(10, 500, args.entries)], axis=1)
        d = dictgen.Dictionary(params=params, signals=signals, norms=norms)
    rank = args.rank
    cd = dictgen.compress_svd(d, rank)
    rng = np.random.default_rng(cfg.seed + 1)
    probes = rng.random((args.probes, d.t_points)).astype(np.float64)

    lines = [f"backend: {kernels.backend()}",
             f"entries={d.n_entries} t_points={d.t_points} rank={rank} "
             f"probes={args.probes}"]
    t0 = time.time()
    matcher.match_batch(d, probes)
    t_full = time.time() - t0
    t0 = time.time()
    matcher.match_compressed_batch(cd, probes)
    t_comp = time.time() - t0
    lines.append(f"full matching:       {t_full:.3f}s "
                 f"({args.probes / t_full:.1f} probes/s)")
    lines.append(f"compressed matching: {t_comp:.3f}s "
                 f"({args.probes / t_comp:.1f} probes/s)")
    lines.append(f"speedup: {t_full / t_comp:.1f}x")

    # compiled core vs pure-numpy fallback on the same workload
    if kernels.backend() == "compiled":
        from mrfica.kernels import _match_np
        dict_mat = d.normalized(np.float32)
        pr = probes.astype(np.float32)
        t0 = time.time()
        kernels.match_argmax(dict_mat, pr)
        t_cy = time.time() - t0
        t0 = time.time()
        kernels.match_argmax(dict_mat, pr, impl=_match_np)
        t_np = time.time() - t0
        lines.append(f"match kernel compiled: {t_cy:.3f}s | numpy: "
                     f"{t_np:.3f}s")
        from mrfica.kernels import _epg_np
        seq = epg.SequenceParams(epg.default_flip_train(
            min(d.t_points, 400), 1))
        t1s = np.linspace(100, 3000, 400)
        t2s = np.linspace(20, 90, 400)
        t0 = time.time()
        kernels.epg_simulate_batch(seq.flip_train, seq.tr_ms, seq.te_ms,
                                   t1s, t2s, 100)
        t_cy = time.time() - t0
        t0 = time.time()
        kernels.epg_simulate_batch(seq.flip_train, seq.tr_ms, seq.te_ms,
                                   t1s, t2s, 100, impl=_epg_np)
        t_np = time.time() - t0
        lines.append(f"epg kernel compiled:   {t_cy:.3f}s | numpy: "
                     f"{t_np:.3f}s (400 entries)")

    with open(os.path.join(cfg.out_dir, "bench.txt"), "w",
              encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        _log(cfg.out_dir, line)
    return EXIT_OK


# --- argument parsing ------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", default=None, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (or MRF_THREADS)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--full-scale", action="store_true", dest="full_scale")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="mrfica",
        description="MR fingerprinting toolkit: dictionaries, matching, "
                    "attention-CNN mapping, channel-selection experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dict", help="simulate and save a dictionary")
    _add_common(p)
    p.add_argument("--svd-rank", type=int, default=None, dest="svd_rank")
    p.set_defaults(func=cmd_gen_dict)

    p = sub.add_parser("phantom", help="generate a phantom and its image")
    _add_common(p)
    p.add_argument("--noise", type=float, default=None)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("match", help="dictionary-match an image")
    _add_common(p)
    p.add_argument("--dict", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--phantom", default=None,
                   help="phantom directory for error reports")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("train", help="train the attention-CNN")
    _add_common(p)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--select", choices=("attention", "pca", "random"),
                   default=None)
    p.add_argument("--n-channels", type=int, default=None,
                   dest="n_channels")
    p.add_argument("--reduce", action="store_true",
                   help="train on reduced channels per --select")
    p.add_argument("--scores", default=None,
                   help="attention-score CSV for --select attention")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="reconstruct maps with a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sidecar", default=None)
    p.add_argument("--image", required=True)
    p.add_argument("--phantom", default=None)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("select-channels",
                       help="channel selection / reduction artifacts")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--sidecar", default=None)
    p.add_argument("--image", default=None)
    p.add_argument("--select", choices=("attention", "pca", "random"),
                   default=None)
    p.add_argument("--n-channels", type=int, default=None,
                   dest="n_channels")
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(func=cmd_select_channels)

    p = sub.add_parser("sweep", help="channel/patch/method sweeps")
    _add_common(p)
    p.add_argument("--axis", choices=("channels", "patch", "method"),
                   required=True)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--select", choices=("attention", "pca", "random"),
                   default=None)
    p.add_argument("--n-channels", type=int, default=None,
                   dest="n_channels")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="full vs compressed matching "
                                     "throughput")
    _add_common(p)
    p.add_argument("--dict", default=None)
    p.add_argument("--entries", type=int, default=100_000)
    p.add_argument("--t-points", type=int, default=2000, dest="t_points")
    p.add_argument("--rank", type=int, default=5)
    p.add_argument("--probes", type=int, default=64)
    p.set_defaults(func=cmd_bench)

    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, IsADirectoryError, PermissionError,
            FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DomainError, MrfError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
