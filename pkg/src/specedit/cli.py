"""Command-line driver: data generation, training, editing, evaluation,
hyperparameter sweeps, and a checkpoint-free selftest.

Exit codes: 0 success, 1 runtime failure (one-line diagnostic with a
category tag on stderr), 2 usage errors.
"""

from . import runtime

runtime.configure()  # thread/allocator tuning; must precede heavy numpy use

import argparse
import csv
import glob
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import numerics as nx
from .backbone import Conditioning, UNetConfig, fused_cross_attention, init_adapter_from_text, init_params
from .conditioning import encode_audio, init_audio_encoder, pool_features, text_pos_table
from .diffusion import GuidanceConfig, guided_noise_prediction, make_schedule
from .editops import (
    TASK_DEFAULTS,
    EditRequest,
    edit_batch,
    sdedit_batch,
    write_edit_result,
)
from .errors import ChecksumError, ContractError, DataFormatError, DimensionError, SpecEditError
from .metrics import (
    GaussianStats,
    attribute_oracle,
    chroma_similarity,
    clip_stats,
    feature_stats,
    frechet_distance,
    transfer_score,
)
from .runconfig import load_config, write_resolved
from .synthdata import (
    TIMBRES,
    build_dataset,
    read_dataset,
    read_grid,
    render_spectrogram,
    sample_clip_spec,
    write_dataset,
)
from .training import (
    TrainConfig,
    load_checkpoint,
    pretrain_base,
    result_to_checkpoint,
    train_adapter,
)

SWEEP_VALUES = {
    "omega": [1, 2, 4, 8],
    "alpha": [0.2, 0.4, 0.6, 0.8],
    "lambda": [3.5, 5.0, 7.5, 10.0],
}


def _fmt(v):
    return f"{v:.10g}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])


def _write_loss_csv(path, loss_log):
    _write_csv(path, ["step", "loss"], [[s, float(v)] for s, v in loss_log])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    n = args.n if args.n is not None else cfg.data_clips
    seed = args.seed if args.seed is not None else cfg.seed
    records = build_dataset(n, seed)
    write_dataset(args.out, records)
    write_resolved(args.out + ".config", cfg, {"command": "gen-data", "n": n,
                                               "seed": seed, "out": args.out})
    print(f"gen-data: wrote {n} clips to {args.out}")
    return 0


def cmd_pretrain(args, cfg):
    records = read_dataset(args.data)
    seed = args.seed if args.seed is not None else cfg.seed
    steps = args.steps if args.steps is not None else cfg.base_steps
    tc = TrainConfig(stage="base", steps=steps, batch_size=cfg.batch_size,
                     lr=cfg.lr, weight_decay=cfg.weight_decay,
                     dropout_p=cfg.dropout_p, seed=seed, t_train=cfg.t_train,
                     log_every=cfg.log_every)
    def progress(step, val):
        print(f"pretrain step {step} loss {val:.4f}", flush=True)
    result = pretrain_base(tc, records, progress=progress)
    result_to_checkpoint(args.out, result)
    _write_loss_csv(args.out + ".loss.csv", result.loss_log)
    write_resolved(args.out + ".config", cfg, {"command": "pretrain",
                                               "data": args.data, "seed": seed,
                                               "steps": steps, "out": args.out})
    print(f"pretrain: {steps} steps, smoothed loss "
          f"{result.smoothed_first:.4f} -> {result.smoothed_last:.4f}")
    return 0


def cmd_train_adapter(args, cfg):
    records = read_dataset(args.data)
    base_ckpt = load_checkpoint(args.base)
    seed = args.seed if args.seed is not None else cfg.seed
    steps = args.steps if args.steps is not None else cfg.adapter_steps
    tc = TrainConfig(stage="adapter", steps=steps, batch_size=cfg.batch_size,
                     lr=cfg.lr, weight_decay=cfg.weight_decay,
                     dropout_p=cfg.dropout_p, seed=seed, t_train=cfg.t_train,
                     log_every=cfg.log_every)
    def progress(step, val):
        print(f"train-adapter step {step} loss {val:.4f}", flush=True)
    result = train_adapter(base_ckpt, tc, records, progress=progress)
    result_to_checkpoint(args.out, result)
    _write_loss_csv(args.out + ".loss.csv", result.loss_log)
    write_resolved(args.out + ".config", cfg, {"command": "train-adapter",
                                               "data": args.data, "base": args.base,
                                               "seed": seed, "steps": steps,
                                               "out": args.out})
    print(f"train-adapter: {steps} steps, smoothed loss "
          f"{result.smoothed_first:.4f} -> {result.smoothed_last:.4f}")
    return 0


def _request_from_args(args, cfg):
    if args.input:
        grid, clip = read_grid(args.input), None
    else:
        rng = np.random.default_rng(args.clip_seed)
        clip, grid = sample_clip_spec(rng), None
        if args.task == "timbre" and clip.timbre_class == args.target:
            pins = {"timbre_class": next(t for t in TIMBRES if t != args.target)}
            clip = sample_clip_spec(np.random.default_rng(args.clip_seed), pins)
    hyper = dict(TASK_DEFAULTS[args.task]) if cfg.use_task_defaults else {
        "pool_rate": cfg.pool_rate, "alpha": cfg.alpha,
        "guidance_scale": cfg.guidance_scale}
    if args.pool_rate is not None:
        hyper["pool_rate"] = args.pool_rate
    if args.alpha is not None:
        hyper["alpha"] = args.alpha
    if args.guidance_scale is not None:
        hyper["guidance_scale"] = args.guidance_scale
    seed = args.seed if args.seed is not None else cfg.seed
    return EditRequest(task=args.task, target_class=args.target, clip=clip,
                       grid=grid, steps=cfg.steps, seed=seed,
                       sampler=cfg.sampler, **hyper)


def cmd_edit(args, cfg):
    request = _request_from_args(args, cfg)
    base = load_checkpoint(args.base)
    adapter = load_checkpoint(args.adapter)
    result = edit_batch([request], base, adapter)[0]
    write_edit_result(args.out, result)
    write_resolved(args.out + ".config", cfg, {
        "command": "edit", "task": args.task, "target": args.target,
        "seed": request.seed, "pool_rate": request.pool_rate,
        "alpha": request.alpha, "guidance_scale": request.guidance_scale,
        "out": args.out})
    print(f"edit: wrote {args.out}.sgrid ({result.wall_time:.2f}s sampling)",
          file=sys.stderr)
    print(f"edit: task={args.task} target={args.target} -> {args.out}.sgrid")
    return 0


def cmd_sdedit(args, cfg):
    request = _request_from_args(args, cfg)
    base = load_checkpoint(args.base)
    result = sdedit_batch([request], base)[0]
    write_edit_result(args.out, result)
    write_resolved(args.out + ".config", cfg, {
        "command": "sdedit", "task": args.task, "target": args.target,
        "seed": request.seed, "guidance_scale": request.guidance_scale,
        "out": args.out})
    print(f"sdedit: task={args.task} target={args.target} -> {args.out}.sgrid")
    return 0


def make_timbre_requests(n, seed, pool_rate, alpha, lam, steps):
    """Fixed held-out timbre-transfer request list for studies."""
    rng = np.random.default_rng(seed)
    requests = []
    for _ in range(n):
        clip = sample_clip_spec(rng)
        others = [t for t in TIMBRES if t != clip.timbre_class]
        target = others[int(rng.integers(len(others)))]
        requests.append(EditRequest(
            task="timbre", target_class=target, clip=clip, pool_rate=pool_rate,
            alpha=alpha, guidance_scale=lam, steps=steps,
            seed=int(rng.integers(0, 2 ** 63))))
    return requests


def _score_results(requests, results):
    pairs = []
    for req, res in zip(requests, results):
        pairs.append((transfer_score(res.edited, req.task, req.target_class),
                      chroma_similarity(req.input_grid(), res.edited)))
    return pairs


def sweep_grid(axis, values, cfg, base_ckpt, adapter_ckpt, n_requests, workers=1):
    """Per-axis tradeoff study rows: (value, means, stds, per-request pairs)."""
    if axis not in SWEEP_VALUES:
        raise ContractError(f"unknown sweep axis {axis!r}")
    if n_requests < 1:
        raise ContractError("sweep needs at least one request")
    values = sorted(values)

    def run_point(value):
        hyper = {"pool_rate": cfg.sweep_pool_fixed, "alpha": cfg.sweep_alpha_fixed,
                 "lam": cfg.sweep_lambda_fixed}
        hyper[{"omega": "pool_rate", "alpha": "alpha", "lambda": "lam"}[axis]] = value
        requests = make_timbre_requests(n_requests, cfg.seed, hyper["pool_rate"],
                                        hyper["alpha"], hyper["lam"], cfg.steps)
        results = edit_batch(requests, base_ckpt, adapter_ckpt)
        pairs = _score_results(requests, results)
        transfer = np.array([p[0] for p in pairs])
        fidelity = np.array([p[1] for p in pairs])
        return (value, float(transfer.mean()), float(fidelity.mean()),
                float(transfer.std()), float(fidelity.std()), pairs)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_point, values))
    else:
        rows = [run_point(v) for v in values]
    rows.sort(key=lambda r: r[0])
    return rows


def cmd_sweep(args, cfg):
    base = load_checkpoint(args.base)
    adapter = load_checkpoint(args.adapter)
    n = args.n if args.n is not None else cfg.sweep_requests
    values = [float(v) for v in args.values.split(",")] if args.values else \
        SWEEP_VALUES[args.axis]
    if args.axis == "omega":
        values = [int(v) for v in values]
    rows = sweep_grid(args.axis, values, cfg, base, adapter, n,
                      workers=cfg.sweep_workers)
    os.makedirs(args.out, exist_ok=True)
    summary = os.path.join(args.out, f"sweep_{args.axis}.csv")
    _write_csv(summary, ["value", "mean_transfer", "mean_chroma",
                         "std_transfer", "std_chroma"],
               [row[:5] for row in rows])
    points = os.path.join(args.out, f"sweep_{args.axis}_points.csv")
    point_rows = []
    for row in rows:
        for i, (tr, fi) in enumerate(row[5]):
            point_rows.append([row[0], i, float(tr), float(fi)])
    _write_csv(points, ["value", "request", "transfer", "fidelity"], point_rows)
    write_resolved(os.path.join(args.out, f"sweep_{args.axis}.config"), cfg,
                   {"command": "sweep", "axis": args.axis, "n": n,
                    "values": ",".join(map(str, values))})
    for row in rows:
        print(f"sweep {args.axis}={row[0]}: transfer {row[1]:.4f}±{row[3]:.4f} "
              f"chroma {row[2]:.4f}±{row[4]:.4f}")
    return 0


def cmd_eval(args, cfg):
    base = load_checkpoint(args.base)
    if args.ablation:
        adapter = load_checkpoint(args.adapter)
        n = args.n if args.n is not None else cfg.eval_requests
        requests = make_timbre_requests(
            n, args.seed if args.seed is not None else cfg.seed,
            cfg.pool_rate, cfg.alpha, cfg.guidance_scale, cfg.steps)
        with_neg = _score_results(
            requests, edit_batch(requests, base, adapter, "negative_prompt"))
        with_null = _score_results(
            requests, edit_batch(requests, base, adapter, "standard"))
        rows = []
        for i, req in enumerate(requests):
            rows.append([i, req.clip.timbre_class, req.target_class,
                         float(with_neg[i][0]), float(with_null[i][0]),
                         float(with_neg[i][1]), float(with_null[i][1])])
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        _write_csv(args.out, ["request", "source", "target",
                              "transfer_negative", "transfer_null",
                              "chroma_negative", "chroma_null"], rows)
        mean_neg = float(np.mean([p[0] for p in with_neg]))
        mean_null = float(np.mean([p[0] for p in with_null]))
        write_resolved(args.out + ".config", cfg, {"command": "eval-ablation",
                                                   "n": n, "out": args.out})
        print(f"ablation: mean transfer with negative prompt {mean_neg:.4f}, "
              f"with null negative {mean_null:.4f}")
        return 0

    names = sorted(glob.glob(os.path.join(args.edits, "*.sgrid")))
    if not names:
        raise ContractError(f"no .sgrid files under {args.edits}")
    _, enc, _ = _base_encoder(base)
    rows = []
    originals = []
    editeds = []
    for path in names:
        stem = path[:-len(".sgrid")]
        with open(stem + ".json") as f:
            meta = json.load(f)
        if meta.get("clip") is None:
            raise ContractError(f"{stem}.json lacks the clip spec needed for scoring")
        from .synthdata import ClipSpec
        clip = ClipSpec(tuple(meta["clip"]["melody"]), meta["clip"]["timbre"],
                        meta["clip"]["texture"], meta["clip"]["accomp"],
                        meta["clip"]["seed"])
        original = render_spectrogram(clip)
        edited = read_grid(path)
        originals.append(original)
        editeds.append(edited)
        rows.append([clip.clip_id(), meta["task"], meta["target_class"],
                     float(chroma_similarity(original, edited)),
                     float(transfer_score(edited, meta["task"], meta["target_class"]))])
    fd = frechet_distance(clip_stats(editeds, enc), clip_stats(originals, enc))
    _write_csv(args.out, ["clip", "task", "target", "chroma_similarity",
                          "transfer_score"], rows)
    with open(args.out + ".frechet.txt", "w") as f:
        f.write(f"frechet_distance = {_fmt(fd)}\n")
    write_resolved(args.out + ".config", cfg, {"command": "eval",
                                               "edits": args.edits, "out": args.out})
    print(f"eval: {len(rows)} clips scored, frechet distance {fd:.4f}")
    return 0


def _base_encoder(ckpt):
    from .training import instantiate_base
    return instantiate_base(ckpt)


# ---------------------------------------------------------------------------
# selftest: closed-form algebra and metric checks, no checkpoints
# ---------------------------------------------------------------------------

def _selftest_checks():
    rng = np.random.default_rng(20240901)
    unet = UNetConfig()
    base = init_params(unet, rng)
    adapter = init_adapter_from_text(base)
    schedule = make_schedule(unet.t_max)
    enc = init_audio_encoder(3)
    tpos = text_pos_table(np.float32)
    from .conditioning import encode_text_batch
    from .synthdata import caption_tokens, null_tokens

    clip = sample_clip_spec(np.random.default_rng(5))
    grid = render_spectrogram(clip)
    feats = pool_features(encode_audio(grid, enc), 2)
    c_y = encode_text_batch([caption_tokens(clip, "none")] * 2,
                            base["text.embed"], tpos)
    c_x = nx.tensor(np.stack([feats.seq] * 2))
    x_t = np.random.default_rng(6).standard_normal((2, 64, 64)).astype(np.float32)
    cond = Conditioning(c_y=c_y, c_x=c_x, alpha=0.5)

    def eps(guidance):
        return guided_noise_prediction(x_t, 10, cond, guidance, base, adapter, unet)

    def check_cfg_identity():
        from .backbone import predict_noise_batch
        conditioned = predict_noise_batch(x_t, [10, 10], cond, base, adapter, unet).data
        diff = np.abs(eps(GuidanceConfig(1.0, "standard")) - conditioned).max()
        assert diff < 1e-6, f"lambda=1 deviates by {diff}"

    def check_cfg_zero():
        from .backbone import predict_noise_batch
        neg = encode_text_batch([null_tokens()] * 2, base["text.embed"], tpos)
        unconditioned = predict_noise_batch(x_t, [10, 10],
                                            Conditioning(c_y=neg), base,
                                            adapter, unet).data
        diff = np.abs(eps(GuidanceConfig(0.0, "standard")) - unconditioned).max()
        assert diff < 1e-6, f"lambda=0 deviates by {diff}"

    def check_guidance_affine():
        e1 = eps(GuidanceConfig(2.0, "standard"))
        e2 = eps(GuidanceConfig(5.0, "standard"))
        mid = eps(GuidanceConfig(3.5, "standard"))
        diff = np.abs(e1 + e2 - 2.0 * mid).max()
        assert diff < 1e-6, f"affinity deviates by {diff}"

    def check_fusion_alpha_zero():
        z = np.random.default_rng(7).standard_normal((6, 32)).astype(np.float32)
        cy = np.random.default_rng(8).standard_normal((4, 32)).astype(np.float32)
        cx = np.random.default_rng(9).standard_normal((16, 32)).astype(np.float32)
        z_text = fused_cross_attention(z, cy, None, 0.0, base, adapter)
        z_fused = fused_cross_attention(z, cy, cx, 0.0, base, adapter)
        assert np.abs(z_fused.data - z_text.data).max() < 1e-6

    def check_fusion_init_identity():
        z = np.random.default_rng(10).standard_normal((6, 32)).astype(np.float32)
        cy = np.random.default_rng(11).standard_normal((4, 32)).astype(np.float32)
        fresh = init_adapter_from_text(base)
        for alpha in (0.5, 1.0):
            z_text = fused_cross_attention(z, cy, None, 0.0, base, fresh)
            z_fused = fused_cross_attention(z, cy, cy, alpha, base, fresh)
            diff = np.abs(z_fused.data - (1 + alpha) * z_text.data).max()
            assert diff < 1e-6, f"(1+alpha) identity deviates by {diff}"

    def check_pool_identity():
        raw = encode_audio(grid, enc)
        assert np.array_equal(pool_features(raw, 1).seq, raw.seq)

    def check_frechet_closed_forms():
        stats = GaussianStats(np.zeros(4), np.eye(4))
        assert abs(frechet_distance(stats, stats)) < 1e-8
        shifted = GaussianStats(np.full(4, 0.5), np.eye(4))
        assert abs(frechet_distance(stats, shifted) - 4 * 0.25) < 1e-8
        a = GaussianStats(np.array([1.0]), np.array([[4.0]]))
        b = GaussianStats(np.array([-1.0]), np.array([[9.0]]))
        assert abs(frechet_distance(a, b) - (4.0 + (2.0 - 3.0) ** 2)) < 1e-8

    def check_chroma_closed_forms():
        assert abs(chroma_similarity(grid, grid) - 1.0) < 1e-9
        lo = render_spectrogram(sample_clip_spec(
            np.random.default_rng(1), {"melody": [20] * 16, "timbre_class": "pure",
                                       "texture_class": "none", "accomp_class": "none"}))
        hi = render_spectrogram(sample_clip_spec(
            np.random.default_rng(1), {"melody": [26] * 16, "timbre_class": "pure",
                                       "texture_class": "none", "accomp_class": "none"}))
        assert abs(chroma_similarity(lo, hi)) < 1e-9

    def check_oracle_exhaustive():
        srng = np.random.default_rng(17)
        from .synthdata import ACCOMPS, TEXTURES, TIMBRES
        for timbre in TIMBRES:
            for texture in TEXTURES:
                for accomp in ACCOMPS:
                    spec = sample_clip_spec(srng, {
                        "timbre_class": timbre, "texture_class": texture,
                        "accomp_class": accomp})
                    scores = attribute_oracle(render_spectrogram(spec))
                    assert max(scores.timbre, key=scores.timbre.get) == timbre, \
                        f"timbre argmax failed for {spec}"
                    assert max(scores.texture, key=scores.texture.get) == texture, \
                        f"texture argmax failed for {spec}"
                    assert max(scores.accomp, key=scores.accomp.get) == accomp, \
                        f"accomp argmax failed for {spec}"

    return [
        ("cfg lambda=1 equals conditioned prediction", check_cfg_identity),
        ("cfg lambda=0 equals negative branch", check_cfg_zero),
        ("guidance affine in lambda", check_guidance_affine),
        ("fusion alpha=0 equals text branch", check_fusion_alpha_zero),
        ("post-init fusion equals (1+alpha) text", check_fusion_init_identity),
        ("pooling rate 1 is identity", check_pool_identity),
        ("frechet closed forms", check_frechet_closed_forms),
        ("chroma closed forms", check_chroma_closed_forms),
        ("attribute oracle recovers all 48 combos", check_oracle_exhaustive),
    ]


def cmd_selftest(args, cfg):
    checks = _selftest_checks()
    failed = 0
    for name, fn in checks:
        try:
            fn()
            print(f"ok  {name}")
        except AssertionError as exc:
            failed += 1
            print(f"FAIL {name}: {exc}")
    print(f"selftest: {len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="specedit",
        description="Desk-scale diffusion spectrogram editor with audio-prompt adapters")
    parser.add_argument("--config", help="run config file (or $SPECEDIT_CONFIG)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic clip dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="stage-1 base pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train-adapter", help="stage-2 adapter training")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)

    for name in ("edit", "sdedit"):
        p = sub.add_parser(name, help=f"run a {name} request")
        p.add_argument("--base", required=True)
        if name == "edit":
            p.add_argument("--adapter", required=True)
        p.add_argument("--task", required=True, choices=("timbre", "texture", "accomp"))
        p.add_argument("--target", required=True)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--clip-seed", type=int, default=0,
                         help="sample the input clip from this seed")
        src.add_argument("--input", help="spectrogram grid file as input")
        p.add_argument("--pool-rate", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--guidance-scale", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score edits, or run the negative-prompt ablation")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter")
    p.add_argument("--edits", help="directory of .sgrid/.json edit outputs")
    p.add_argument("--ablation", action="store_true")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="tradeoff study over omega / alpha / lambda")
    p.add_argument("--axis", required=True, choices=tuple(SWEEP_VALUES))
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)

    sub.add_parser("selftest", help="closed-form checks, no checkpoints needed")
    return parser


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-adapter": cmd_train_adapter,
    "edit": cmd_edit,
    "sdedit": cmd_sdedit,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "selftest": cmd_selftest,
}

_CATEGORIES = (
    (ChecksumError, "corruption"),
    (DataFormatError, "format"),
    (DimensionError, "dimension"),
    (ContractError, "contract"),
    (SpecEditError, "error"),
    (OSError, "io"),
)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        return _HANDLERS[args.command](args, cfg)
    except tuple(c for c, _ in _CATEGORIES) as exc:
        for klass, tag in _CATEGORIES:
            if isinstance(exc, klass):
                print(f"specedit {args.command}: {tag}: {exc}", file=sys.stderr)
                return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
