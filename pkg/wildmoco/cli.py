"""
Command line entry point: ``python -m wildmoco <command> [options]``.

Stage 0  synth             synthetic aerial frames with box annotations
Stage 1  tile              pretraining patch set
         build-downstream  labeled long-tail fg/bg set with 8:1:1 frame split
Stage 2  pretrain          one run per preset (or per --sweep combination)
Stage 3  probe / finetune  downstream evaluation, appended to results.csv
         knn               kNN accuracy of a checkpoint, optional embedding export
Stage 4  report            curves, results table, per-preset summary

Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.
"""

import argparse
import itertools
import os
import sys
import traceback
from dataclasses import replace

import pandas as pd

from wildmoco.augment import channel_stats
from wildmoco.checkpoint import CheckpointError, load_checkpoint
from wildmoco.config import cache_dir, number_proc, output_dir
from wildmoco.contrastive import TrainingDivergedError
from wildmoco.dataset import LabeledCrops, PatchDataset
from wildmoco.dir_helper import create_run_dir, ensure_dir
from wildmoco.encoder import encoder_from_config
from wildmoco.evaluate import (append_results, evaluate_finetune, evaluate_linear, extract_features,
                               load_split, write_predictions)
from wildmoco.log_helper import write_log
from wildmoco.report import build_report
from wildmoco.run_config import (ConfigError, PRESETS, dump_config, from_flat, load_run_config,
                                 parse_assignments)
from wildmoco.synth import SynthConfig, synth_generate
from wildmoco.tiling import (DatasetManifest, build_downstream_set, build_pretrain_set, load_frames,
                             save_frames, write_patches)
from wildmoco.trainer import KnnData, knn_monitor, pretrain, restore_encoder

SEED_KEYS = ("data_seed", "aug_seed", "init_seed", "cld_kmeans_seed", "mix_seed", "probe_seed", "finetune_seed")


def _patch_dir(manifest_dir):
    return os.path.join(manifest_dir, "patches")


def _load_config(args, extra=None):
    overrides = parse_assignments(getattr(args, "set", None))
    if args.seed is not None:
        for key in SEED_KEYS:
            overrides.setdefault(key, str(args.seed))
    overrides.update(extra or {})
    return load_run_config(args.config, getattr(args, "preset", None), args.desk, overrides)


def cmd_synth(args):
    config = SynthConfig(n_frames=args.frames, width=args.width, height=args.height, density=args.density)
    frames = synth_generate(config, seed=args.seed or 0)
    save_frames(frames, args.out)
    n_boxes = sum(len(f.annotations) for f in frames)
    n_empty = sum(1 for f in frames if not f.annotations)
    write_log(f"{len(frames)} frames, {n_boxes} animals, {n_empty} empty frames -> {args.out}")
    return 0


def cmd_tile(args):
    frames = load_frames(args.frames_dir)
    manifest = build_pretrain_set(frames, args.per_frame, args.size,
                                  overlap_on_animal_frames=not args.no_overlap_on_animals,
                                  overlap_fraction=args.overlap, seed=args.seed or 0,
                                  workers=args.workers)
    manifest.save(args.out)
    write_patches(manifest, frames, _patch_dir(args.out))
    write_log(f"{len(manifest.records)} pretraining patches from {len(frames)} frames -> {args.out}")
    return 0


def cmd_build_downstream(args):
    frames = load_frames(args.frames_dir)
    manifest = build_downstream_set(frames, fg_size=args.fg_size, bg_size=args.bg_size,
                                    ratio_fg_bg=1.0 / args.ratio, split_seeds=tuple(args.split_seeds),
                                    split_seed=args.seed or 0)
    manifest.save(args.out)
    write_patches(manifest, frames, _patch_dir(args.out))
    counts = manifest.counts()
    for split in ("train", "val", "test"):
        write_log(f"{split}: {counts.get((split, 'foreground'), 0)} foreground, "
                  f"{counts.get((split, 'background'), 0)} background")
    if manifest.skipped:
        write_log(f"{len(manifest.skipped)} boxes skipped, see skipped.csv", level="WARNING")
    return 0


def parse_sweep(items):
    """``["cld_k=16,32", "cld_lam=0.1,0.25"]`` -> list of override dicts, one per combination."""
    axes = []
    for key, values in parse_assignments(items).items():
        options = [v.strip() for v in values.split(",") if v.strip()]
        if not options:
            raise ConfigError(f"sweep '{key}' has no values")
        axes.append([(key, v) for v in options])
    return [dict(combo) for combo in itertools.product(*axes)]


def _knn_data(config):
    if not (config.downstream_manifest and config.knn_every):
        return None
    manifest = DatasetManifest.load(config.downstream_manifest)
    patch_dir = _patch_dir(config.downstream_manifest)
    return KnnData(train=LabeledCrops(load_split(manifest, patch_dir, "train"), config.aug.crop_size),
                   val=LabeledCrops(load_split(manifest, patch_dir, "val"), config.aug.crop_size))


def _pretrain_patches(config):
    if not config.pretrain_manifest:
        raise ConfigError("pretrain_manifest is not set (use --pretrain-manifest or --set pretrain_manifest=DIR)")
    manifest = DatasetManifest.load(config.pretrain_manifest)
    cache_path = None
    if cache_dir:
        ensure_dir(cache_dir)
        name = os.path.basename(os.path.normpath(config.pretrain_manifest))
        cache_path = os.path.join(cache_dir, f"patches_{name}.pkl")
    return PatchDataset.from_patch_dir(manifest, _patch_dir(config.pretrain_manifest), ("pretrain",),
                                       cache_path=cache_path)


def cmd_pretrain(args):
    extra = {}
    if args.pretrain_manifest:
        extra["pretrain_manifest"] = args.pretrain_manifest
    if args.downstream_manifest:
        extra["downstream_manifest"] = args.downstream_manifest
    for flag, key in (("gamma", "mix_gamma"), ("mix_p", "mix_p"), ("beta", "mix_beta")):
        if getattr(args, flag) is not None:
            extra[key] = str(getattr(args, flag))

    if args.resume:
        payload = load_checkpoint(args.resume)
        flat = dict(payload["config"])
        flat.update(parse_assignments(args.set))
        flat.update(extra)
        config = from_flat(flat)
        config.run_id = args.run_id or f"{config.run_id or config.preset}_resume{payload['step']}"
        runs = [(config, args.resume)]
    else:
        runs = []
        for combo in parse_sweep(args.sweep):
            config = _load_config(args, dict(extra, **combo))
            suffix = "".join(f"_{k}{v}" for k, v in combo.items())
            seed = args.seed if args.seed is not None else config.init_seed
            config.run_id = (args.run_id or f"{config.preset}_s{seed}") + suffix
            runs.append((config, None))

    for config, resume_from in runs:
        patches = _pretrain_patches(config)
        run_dir = create_run_dir(args.out, config.run_id)
        dump_config(config, os.path.join(run_dir, "config.env"))
        result = pretrain(config, patches, run_dir, knn_data=_knn_data(config), resume_from=resume_from,
                          max_steps=args.max_steps)
        write_log(f"{config.run_id}: {result.final_step} steps, checkpoint {result.checkpoint_path}")
    return 0


def _encoder_for_eval(args, config, manifest, patch_dir):
    if args.random_init:
        state = encoder_from_config(config)
        state.set_normalization(*channel_stats(load_split(manifest, patch_dir, "train").images))
        run_id = args.run_id or f"random_init_s{config.init_seed}"
        return state, config, run_id
    if not args.checkpoint:
        raise ConfigError("either --checkpoint or --random-init is required")
    state, ckpt_config = restore_encoder(load_checkpoint(args.checkpoint))
    return state, ckpt_config, args.run_id or ckpt_config.run_id or ckpt_config.preset


def _echo_eval_config(out_dir, name, encoder_config, **updates):
    """Write the encoder's config with the evaluation settings actually used as ``config_<name>.env``."""
    return dump_config(replace(encoder_config, **updates), os.path.join(out_dir, f"config_{name}.env"))


def _cmd_evaluate(args, mode):
    config = _load_config(args)
    manifest = DatasetManifest.load(args.manifest)
    patch_dir = _patch_dir(args.manifest)
    state, encoder_config, run_id = _encoder_for_eval(args, config, manifest, patch_dir)
    crop_size = encoder_config.aug.crop_size
    ensure_dir(args.out)
    results_path = os.path.join(args.out, "results.csv")
    for fraction in args.fraction or [config.label_fraction]:
        if mode == "linear":
            result = evaluate_linear(state, manifest, patch_dir, fraction, config.probe, crop_size,
                                     args.eval_split, seed=config.probe.seed)
        else:
            result = evaluate_finetune(state, manifest, patch_dir, fraction, config.finetune, crop_size,
                                       args.eval_split, seed=config.finetune.seed)
        append_results(results_path, run_id, result)
        _echo_eval_config(args.out, f"{run_id}_{mode}_{fraction:g}", encoder_config, run_id=run_id,
                          label_fraction=fraction, probe=config.probe, finetune=config.finetune)
        write_predictions(os.path.join(args.out, f"preds_{run_id}_{mode}_{fraction:g}.csv"), result)
        flag = " (no foreground predicted)" if result.metrics.precision_undefined else ""
        write_log(f"{run_id} {mode} fraction {fraction:g}: top1 {result.top1:.2f} "
                  f"prec {result.precision_fg:.2f}{flag} rec {result.recall_fg:.2f}")
    return 0


def cmd_probe(args):
    return _cmd_evaluate(args, "linear")


def cmd_finetune(args):
    return _cmd_evaluate(args, "end_to_end")


def cmd_knn(args):
    state, config = restore_encoder(load_checkpoint(args.checkpoint))
    manifest = DatasetManifest.load(args.manifest)
    patch_dir = _patch_dir(args.manifest)
    train = LabeledCrops(load_split(manifest, patch_dir, "train"), config.aug.crop_size)
    held_out = LabeledCrops(load_split(manifest, patch_dir, args.eval_split), config.aug.crop_size)
    train_feats, train_labels = extract_features(state, train)
    eval_feats, eval_labels = extract_features(state, held_out)
    k, t = args.k or config.knn_k, args.t or config.knn_t
    acc = knn_monitor(train_feats, train_labels, eval_feats, eval_labels, k=k, t=t)
    write_log(f"knn top1 {acc:.2f} ({len(train)} train / {len(held_out)} {args.eval_split})")
    if args.export:
        ensure_dir(os.path.dirname(args.export))
        df = pd.DataFrame(eval_feats, columns=[f"f{i}" for i in range(eval_feats.shape[1])])
        df.insert(0, "label", eval_labels)
        df.insert(0, "patch_id", [r.patch_id for r in held_out.patches.records])
        df.to_csv(args.export, index=False)
        run_id = config.run_id or config.preset
        _echo_eval_config(os.path.dirname(args.export) or ".", f"{run_id}_knn", config, knn_k=k, knn_t=t)
        write_log(f"embeddings written to {args.export}")
    return 0


def cmd_report(args):
    warnings = build_report(args.runs, args.results, args.out)
    write_log(f"report written to {args.out} ({len(warnings)} warnings)")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='flat key=value run config file', required=False)
    common.add_argument('--seed', type=int, help='seed for every random stream of the command', required=False)
    common.add_argument('--desk', action='store_true', help='small CPU-sized defaults')
    common.add_argument('--set', type=str, nargs='*', default=[], metavar='KEY=VALUE',
                        help='config overrides, e.g. cld_k=16')

    parser = argparse.ArgumentParser(prog='wildmoco', description='Self-supervised pretraining for aerial wildlife imagery')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], help='generate synthetic aerial frames')
    p.add_argument('--frames', type=int, default=20)
    p.add_argument('--width', type=int, default=512)
    p.add_argument('--height', type=int, default=512)
    p.add_argument('--density', type=float, default=2.0, help='expected animals per 512x512 area')
    p.add_argument('--out', type=str, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('tile', parents=[common], help='build the pretraining patch set')
    p.add_argument('--frames-dir', type=str, required=True)
    p.add_argument('--size', type=int, default=256)
    p.add_argument('--per-frame', type=int, default=4)
    p.add_argument('--overlap', type=float, default=0.5)
    p.add_argument('--no-overlap-on-animals', action='store_true')
    p.add_argument('--workers', type=int, default=number_proc)
    p.add_argument('--out', type=str, required=True)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser('build-downstream', parents=[common], help='build the labeled fg/bg set')
    p.add_argument('--frames-dir', type=str, required=True)
    p.add_argument('--fg-size', type=int, default=224)
    p.add_argument('--bg-size', type=int, default=512)
    p.add_argument('--ratio', type=float, default=18.0, help='background patches per foreground patch in train')
    p.add_argument('--split-seeds', type=int, nargs=3, default=[1, 2, 3])
    p.add_argument('--out', type=str, required=True)
    p.set_defaults(func=cmd_build_downstream)

    p = sub.add_parser('pretrain', parents=[common], help='self-supervised pretraining')
    p.add_argument('--preset', type=str, choices=sorted(PRESETS), required=False)
    p.add_argument('--pretrain-manifest', type=str, required=False)
    p.add_argument('--downstream-manifest', type=str, required=False, help='enables the kNN monitor')
    p.add_argument('--sweep', type=str, nargs='*', default=[], metavar='KEY=V1,V2')
    p.add_argument('--resume', type=str, required=False, help='checkpoint to continue from')
    p.add_argument('--run-id', type=str, required=False)
    p.add_argument('--max-steps', type=int, required=False)
    p.add_argument('--gamma', type=float, required=False, help='color-branch weight (mix_gamma)')
    p.add_argument('--mix-p', type=float, required=False, help='mixture probability (mix_p)')
    p.add_argument('--beta', type=float, required=False, help='Beta(beta, beta) for lambda (mix_beta)')
    p.add_argument('--out', type=str, default=output_dir)
    p.set_defaults(func=cmd_pretrain)

    for name, func, text in (('probe', cmd_probe, 'frozen-feature linear probe'),
                             ('finetune', cmd_finetune, 'end-to-end fine-tuning')):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument('--checkpoint', type=str, required=False)
        p.add_argument('--random-init', action='store_true', help='evaluate an untrained encoder')
        p.add_argument('--manifest', type=str, required=True, help='downstream set directory')
        p.add_argument('--fraction', type=float, nargs='*', default=[], help='one results row per label fraction')
        p.add_argument('--eval-split', type=str, choices=['val', 'test'], default='val')
        p.add_argument('--run-id', type=str, required=False)
        p.add_argument('--out', type=str, default=output_dir)
        p.set_defaults(func=func)

    p = sub.add_parser('knn', parents=[common], help='kNN accuracy of a checkpoint')
    p.add_argument('--checkpoint', type=str, required=True)
    p.add_argument('--manifest', type=str, required=True)
    p.add_argument('--eval-split', type=str, choices=['val', 'test'], default='val')
    p.add_argument('--k', type=int, required=False)
    p.add_argument('--t', type=float, required=False)
    p.add_argument('--export', type=str, required=False, help='write held-out embeddings to this CSV')
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser('report', parents=[common], help='plots and tables over finished runs')
    p.add_argument('--runs', type=str, nargs='*', default=[])
    p.add_argument('--results', type=str, required=False)
    p.add_argument('--out', type=str, required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (ConfigError, CheckpointError, FileNotFoundError, FileExistsError, ValueError) as e:
        write_log(str(e), level="ERROR")
        return 2
    except TrainingDivergedError as e:
        write_log(f"training diverged: {e}", level="ERROR")
        return 1
    except Exception as e:
        write_log(f"{type(e).__name__}: {e}", level="ERROR")
        traceback.print_exception(type(e), e, e.__traceback__)
        return 1


if __name__ == '__main__':
    sys.exit(main())
