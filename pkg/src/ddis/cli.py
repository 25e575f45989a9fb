"""Command-line surface tying the engine into reproducible experiment runs."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import diffusion, guidance
from .artifacts import array_sha256, write_csv, write_image_grid, write_pgm, write_raw_tensor
from .cat import AblationUnsupportedError, CatTrainConfig, Engines, ddis_synthesize, optimize_cat
from .nets import IdentityCodec, weight_hash
from .persistence import (
    CheckpointContainer,
    CheckpointError,
    ConfigError,
    RunConfig,
    format_manifest,
    load_model,
    load_token,
    save_model,
    save_token,
    stored_token_classes,
)
from .tensor import NumericError


class UsageError(Exception):
    """Bad invocation: unknown flags, malformed config, missing inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="ddis", description="BN-statistics guided diffusion synthesis engine")
    parser.add_argument("--config", type=str, default=None, help="run configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", type=str, default="out", help="artifact output directory")
    parser.add_argument("--precision", choices=["f32", "f64"], default=None)
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers for independent generation")
    sub = parser.add_subparsers(dest="command", required=True)

    fixtures = sub.add_parser("fixtures", help="fixture dataset and checkpoint management")
    fixtures_sub = fixtures.add_subparsers(dest="subcommand", required=True)
    fixtures_sub.add_parser("build", help="generate datasets and train the frozen checkpoints")

    for name, help_text in [
        ("sample", "plain classifier-free-guided sampling"),
        ("guided-sample", "sampling with domain alignment guidance"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoints", required=True)
        p.add_argument("--class-id", type=int, required=True)
        p.add_argument("--n", type=int, default=None, help="number of images (default: config batch)")

    cat = sub.add_parser("cat", help="class-token operations")
    cat_sub = cat.add_subparsers(dest="subcommand", required=True)
    cat_opt = cat_sub.add_parser("optimize", help="optimize one class token")
    cat_opt.add_argument("--checkpoints", required=True)
    cat_opt.add_argument("--class-id", type=int, required=True)

    synth = sub.add_parser("synthesize", help="full pipeline: optimize tokens then generate per class")
    synth.add_argument("--checkpoints", required=True)
    synth.add_argument("--per-class", type=int, default=None)
    synth.add_argument("--classes", type=str, default=None, help="comma list (default: all)")
    synth.add_argument("--tokens", type=str, default=None, help="container with persisted tokens")

    ev = sub.add_parser("eval", help="evaluation harnesses")
    ev_sub = ev.add_subparsers(dest="subcommand", required=True)
    report = ev_sub.add_parser("report", help="metric report for a synthesize run")
    report.add_argument("--checkpoints", required=True)
    report.add_argument("--run", required=True, help="synthesize output directory")
    dfkd = ev_sub.add_parser("dfkd", help="data-free knowledge distillation comparison")
    dfkd.add_argument("--checkpoints", required=True)
    dfkd.add_argument("--run", required=True)
    stab = ev_sub.add_parser("bn-stability", help="per-timestep statistics study")
    stab.add_argument("--checkpoints", required=True)
    stab.add_argument("--class-id", type=int, default=0)
    stab.add_argument("--n", type=int, default=8)

    sub.add_parser("oracle-check", help="sampler moment checks against the analytic mixture")
    # spec'd spelling: `oracle check` also accepted via the alias below
    oracle = sub.add_parser("oracle", help="analytic-oracle commands")
    oracle_sub = oracle.add_subparsers(dest="subcommand", required=True)
    oracle_sub.add_parser("check")

    sweep = sub.add_parser("sweep", help="hyperparameter sweeps")
    sweep_sub = sweep.add_subparsers(dest="subcommand", required=True)
    sweep_dag = sweep_sub.add_parser("dag", help="lambda_bn x s_g grid")
    sweep_dag.add_argument("--checkpoints", required=True)
    sweep_dag.add_argument("--class-id", type=int, default=0)

    ablate = sub.add_parser("ablate", help="design-choice ablations")
    ablate.add_argument("what", choices=["tokens", "bn-loss", "unfreeze", "attention"])
    ablate.add_argument("--checkpoints", required=True)
    ablate.add_argument("--class-id", type=int, default=0)
    ablate.add_argument("--token-count", type=int, default=5)

    return parser


def _load_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.config:
        config = RunConfig.from_file(args.config, overrides)
    else:
        config = RunConfig(overrides)
    if args.seed is not None:
        config.set("seed", args.seed)
    if args.precision is not None:
        config.set("precision", args.precision)
    return config


def _load_engines(path: str, config: RunConfig) -> Engines:
    container = CheckpointContainer.load(path)
    classifier = load_model(container, "classifier")
    denoiser = load_model(container, "denoiser")
    names = container.names(kind="codec")
    codec = load_model(container, "codec") if names else IdentityCodec()
    if not isinstance(codec, IdentityCodec):
        # pixel-space identity codec is the default engine path
        codec = IdentityCodec(tuple(codec.image_shape))
    if config.get("precision") == "f32":
        for model in (classifier, denoiser):
            for p in model.params():
                p.data = p.data.astype(np.float32)
    return Engines(
        denoiser=denoiser,
        codec=codec,
        classifier=classifier,
        schedule=config.schedule(),
        dag=config.dag_config(),
    )


def _emit_images(out_dir: Path, images: np.ndarray, rows: list, config: RunConfig, checkpoints_hashes: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    img_dir = out_dir / "images"
    img_dir.mkdir(exist_ok=True)
    manifest = {
        "config_hash": config.config_hash(),
        "seed": config.get("seed"),
        "n_images": len(images),
        "image_shape": list(images.shape[1:]),
        **checkpoints_hashes,
    }
    for i, row in enumerate(rows):
        name = f"class{row['class_id']}_{row['index']:04d}"
        write_pgm(img_dir / f"{name}.pgm", images[i])
        manifest[f"image.{name}"] = f"{row['class_id']},{row['seed']},{array_sha256(images[i])}"
    write_raw_tensor(out_dir / "images.f64", images)
    write_image_grid(out_dir / "grid.pgm", images[: min(64, len(images))])
    np.save(out_dir / "labels.npy", np.array([r["class_id"] for r in rows]))
    (out_dir / "run_manifest.txt").write_text(format_manifest(manifest))


def _checkpoint_hashes(engines: Engines) -> dict:
    return {
        "classifier_hash": weight_hash(engines.classifier),
        "denoiser_hash": weight_hash(engines.denoiser),
    }


def cmd_fixtures_build(args, config: RunConfig) -> int:
    from .fixtures import build_fixture_bundle

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = build_fixture_bundle(
        master_seed=config.get("seed"),
        n_per_class=config.get("fixtures.n_per_class"),
        heldout_per_class=config.get("fixtures.heldout_per_class"),
        domain=config.get("fixtures.domain"),
        classifier_epochs=config.get("fixtures.classifier_epochs"),
        denoiser_epochs=config.get("fixtures.denoiser_epochs"),
        codec_epochs=config.get("fixtures.codec_epochs"),
        t_sample=config.get("schedule.t_sample"),
        cfg_scale=config.get("schedule.cfg_scale"),
    )
    container = CheckpointContainer()
    save_model(container, "classifier", bundle.classifier)
    save_model(container, "denoiser", bundle.denoiser)
    save_model(container, "codec", bundle.codec_learned)
    manifest = dict(bundle.manifest)
    manifest["config_hash"] = config.config_hash()
    container.add_text("manifest", "manifest", format_manifest(manifest))
    container.save(out / "checkpoints.ddis")
    (out / "manifest.txt").write_text(format_manifest(manifest))
    write_image_grid(out / "train_grid.pgm", bundle.train_set.images[::37][:64])
    print(f"fixtures: checkpoints and manifest written to {out}")
    print(f"  classifier accuracy {manifest['classifier_train_accuracy']:.4f}")
    return 0


def cmd_sample(args, config: RunConfig, guided: bool) -> int:
    engines = _load_engines(args.checkpoints, config)
    n = args.n or config.get("sample.batch")
    cond = engines.denoiser.label_cond(args.class_id)
    seed = config.get("seed")
    if guided:
        image, trace = guidance.guided_sample(
            engines.denoiser, engines.codec, engines.classifier, engines.schedule,
            cond, engines.dag, seed, batch=n,
        )
    else:
        image, trace = diffusion.sample(engines.denoiser, engines.codec, engines.schedule, cond, seed, batch=n)
    out = Path(args.out)
    rows = [{"class_id": args.class_id, "index": i, "seed": seed} for i in range(n)]
    _emit_images(out, image.data, rows, config, _checkpoint_hashes(engines))
    trace.write_csv(out / "trace.csv")
    print(f"{'guided-' if guided else ''}sample: {n} images for class {args.class_id} in {out}")
    return 0


def cmd_cat_optimize(args, config: RunConfig) -> int:
    engines = _load_engines(args.checkpoints, config)
    token = optimize_cat(engines, args.class_id, config.cat_config(), config.get("seed"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    container = CheckpointContainer()
    save_token(container, token)
    container.save(out / "tokens.ddis")
    write_csv(
        out / f"cat_class{args.class_id}_log.csv",
        ["epoch", "mean_ce", "correct_fraction", "mean_confidence"],
        [[e["epoch"], e["mean_ce"], e["correct_fraction"], e["mean_confidence"]] for e in token.log],
    )
    final = token.log[-1]
    print(
        f"cat optimize: class {args.class_id} stopped after epoch {final['epoch']} "
        f"(correct fraction {final['correct_fraction']:.3f})"
    )
    return 0


def cmd_synthesize(args, config: RunConfig) -> int:
    engines = _load_engines(args.checkpoints, config)
    per_class = args.per_class or config.get("synth.per_class")
    class_ids = (
        [int(x) for x in args.classes.split(",")]
        if args.classes
        else list(range(engines.classifier.config.n_classes))
    )
    tokens = {}
    if args.tokens:
        token_container = CheckpointContainer.load(args.tokens)
        for class_id in stored_token_classes(token_container):
            tokens[class_id] = load_token(token_container, class_id)
    seed = config.get("seed")
    cat_config = config.cat_config()
    if args.jobs > 1:
        images, manifest_rows, tokens = _synthesize_parallel(
            engines, class_ids, cat_config, per_class, seed, tokens, args.jobs
        )
    else:
        images, manifest_rows, tokens = ddis_synthesize(engines, class_ids, cat_config, per_class, seed, tokens)
    stacked = np.concatenate([images[c] for c in class_ids], axis=0)
    rows = []
    for c in class_ids:
        rows.extend(r for r in manifest_rows if r["class_id"] == c)
    out = Path(args.out)
    _emit_images(out, stacked, rows, config, _checkpoint_hashes(engines))
    container = CheckpointContainer()
    for token in tokens.values():
        save_token(container, token)
    container.save(out / "tokens.ddis")
    print(f"synthesize: {len(stacked)} images over {len(class_ids)} classes in {out}")
    return 0


def _synthesize_parallel(engines, class_ids, cat_config, per_class, seed, tokens, jobs):
    import concurrent.futures

    images, rows = {}, []
    pending = [c for c in class_ids]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = {
            pool.submit(ddis_synthesize, engines, [c], cat_config, per_class, seed, tokens): c
            for c in pending
        }
        for future in concurrent.futures.as_completed(futures):
            imgs, manifest_rows, toks = future.result()
            images.update(imgs)
            rows.extend(manifest_rows)
            tokens.update(toks)
    return images, rows, tokens


def _load_run(run_dir: Path) -> tuple:
    from .artifacts import read_raw_tensor
    from .persistence import parse_manifest

    manifest = parse_manifest((run_dir / "run_manifest.txt").read_text())
    labels = np.load(run_dir / "labels.npy")
    shape = [int(x) for x in manifest["image_shape"].split(",")]
    images = read_raw_tensor(run_dir / "images.f64", (int(manifest["n_images"]), *shape))
    return images, labels


def cmd_eval_report(args, config: RunConfig) -> int:
    from .evaluation import metric_report
    from .fixtures import generate_dataset

    engines = _load_engines(args.checkpoints, config)
    images, labels = _load_run(Path(args.run))
    reference = generate_dataset(
        config.get("fixtures.domain"), config.get("fixtures.heldout_per_class"), config.get("seed") + 1
    )
    report = metric_report(images, labels, engines.classifier, reference.images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "report.csv", ["metric", "value"], report.rows())
    print(f"eval report: feature distance {report.feature_distance:.4f}, "
          f"top-1 agreement {report.top1_agreement:.3f} -> {out / 'report.csv'}")
    return 0


def cmd_eval_dfkd(args, config: RunConfig) -> int:
    from .evaluation import dfkd_train_student, student_config
    from .fixtures import generate_dataset

    engines = _load_engines(args.checkpoints, config)
    images, _ = _load_run(Path(args.run))
    heldout = generate_dataset(
        config.get("fixtures.domain"), config.get("fixtures.heldout_per_class"), config.get("seed") + 1
    )
    result = dfkd_train_student(
        engines.classifier,
        student_config(n_classes=engines.classifier.config.n_classes),
        images,
        temperature=config.get("eval.kd_temperature"),
        epochs=config.get("eval.kd_epochs"),
        eval_images=heldout.images,
        eval_labels=heldout.labels,
        source="ddis",
        seed=config.get("seed"),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "dfkd.csv", ["teacher", "student", "source", "accuracy"],
              [[result.teacher_id, result.student_id, result.source, result.student_accuracy]])
    print(f"eval dfkd: student accuracy {result.student_accuracy:.3f} -> {out / 'dfkd.csv'}")
    return 0


def cmd_eval_bn_stability(args, config: RunConfig) -> int:
    from .evaluation import bn_stability_study, write_bn_stability_csv

    engines = _load_engines(args.checkpoints, config)
    study = bn_stability_study(
        engines.denoiser, engines.codec, engines.classifier, engines.schedule,
        engines.denoiser.label_cond(args.class_id), n=args.n, seed=config.get("seed"),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_bn_stability_csv(out / "bn_stability.csv", study)
    write_csv(out / "bn_stability_cov.csv", ["layer", "coefficient_of_variation"],
              list(enumerate(study["coefficient_of_variation"])))
    print(f"eval bn-stability: {len(study['rows'])} timesteps x {study['n_layers']} layers -> {out}")
    return 0


def cmd_oracle_check(args, config: RunConfig) -> int:
    from .diffusion import make_schedule
    from .oracle import oracle_sample_check, two_class_cluster_mixture

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = config.get("seed")
    all_ok = True
    for mode in ("deterministic", "ddpm-matched"):
        schedule = make_schedule(t_sample=config.get("schedule.t_sample"), sigma_mode=mode)
        for y in (None, 1):
            report = oracle_sample_check(two_class_cluster_mixture(schedule), n=10000, seed=seed, y=y)
            tag = f"{mode}-{'marginal' if y is None else f'class{y}'}"
            report.write_csv(out / f"moments_{tag}.csv")
            status = "ok" if report.passed else "OUT OF BAND"
            print(f"oracle check [{tag}]: mean_ok={report.mean_ok} cov_ok={report.cov_ok} ({status})")
            all_ok = all_ok and report.passed
    if not all_ok:
        raise NumericError("oracle moment check failed: sampler moments out of Monte-Carlo bands")
    return 0


def cmd_sweep_dag(args, config: RunConfig) -> int:
    engines = _load_engines(args.checkpoints, config)
    lambdas = [float(x) for x in str(config.get("sweep.lambdas")).split(",")]
    s_gs = [float(x) for x in str(config.get("sweep.s_gs")).split(",")]
    cond = engines.denoiser.label_cond(args.class_id)
    rows = guidance.sweep_dag(
        engines.denoiser, engines.codec, engines.classifier, engines.schedule, cond,
        lambdas, s_gs, seed=config.get("seed"), batch=config.get("sweep.batch"),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "dag_sweep.csv",
              ["lambda_bn", "s_g", "eta", "final_l_bn", "mean_max_confidence", "finite"],
              [[r["lambda_bn"], r["s_g"], r["eta"], r["final_l_bn"], r["mean_max_confidence"], int(r["finite"])] for r in rows])
    bad = [r for r in rows if not r["finite"]]
    print(f"sweep dag: {len(rows)} cells -> {out / 'dag_sweep.csv'}" + (f" ({len(bad)} non-finite)" if bad else ""))
    if bad:
        raise NumericError("sweep produced non-finite metrics")
    return 0


def cmd_ablate(args, config: RunConfig) -> int:
    engines = _load_engines(args.checkpoints, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = config.cat_config()
    seed = config.get("seed")
    if args.what == "unfreeze":
        try:
            bad = CatTrainConfig(
                lr=base.lr, max_epochs=1, accumulation=base.accumulation,
                early_stop=base.early_stop, unfreeze_denoiser=True,
            )
            optimize_cat(engines, args.class_id, bad, seed)
        except AblationUnsupportedError as exc:
            print(f"ablate unfreeze: refused as designed: {exc}")
            return 0
        raise UsageError("unfreeze ablation unexpectedly ran")
    if args.what == "tokens":
        rows = []
        for count in (0, args.token_count - 1):
            cfg = CatTrainConfig(
                lr=base.lr, max_epochs=base.max_epochs, accumulation=base.accumulation,
                early_stop=base.early_stop, extra_token_count=count,
            )
            token = optimize_cat(engines, args.class_id, cfg, seed)
            rows.append([1 + count, token.log[-1]["correct_fraction"], token.log[-1]["mean_ce"]])
        write_csv(out / "ablate_tokens.csv", ["n_tokens", "final_correct_fraction", "final_mean_ce"], rows)
        print(f"ablate tokens: single vs {args.token_count} tokens -> {out / 'ablate_tokens.csv'}")
        return 0
    if args.what == "bn-loss":
        rows = []
        for weight in (0.0, 0.1):
            cfg = CatTrainConfig(
                lr=base.lr, max_epochs=base.max_epochs, accumulation=base.accumulation,
                early_stop=base.early_stop, bn_loss_weight=weight,
            )
            token = optimize_cat(engines, args.class_id, cfg, seed)
            rows.append([weight, token.log[-1]["correct_fraction"], token.log[-1]["mean_ce"]])
        write_csv(out / "ablate_bn_loss.csv", ["bn_loss_weight", "final_correct_fraction", "final_mean_ce"], rows)
        print(f"ablate bn-loss: -> {out / 'ablate_bn_loss.csv'}")
        return 0
    if args.what == "attention":
        from .evaluation import attention_sweep_grid
        from .cat import init_token

        token = init_token(engines, args.class_id, base, seed)
        attention_sweep_grid(engines, token, (1.0, 5.0, 10.0, 20.0, 30.0), n=4, seed=seed,
                             out_path=out / "attention_sweep.pgm")
        print(f"ablate attention: grid -> {out / 'attention_sweep.pgm'}")
        return 0
    raise UsageError(f"unknown ablation {args.what!r}")


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = _load_config(args)
    if args.command == "fixtures":
        return cmd_fixtures_build(args, config)
    if args.command == "sample":
        return cmd_sample(args, config, guided=False)
    if args.command == "guided-sample":
        return cmd_sample(args, config, guided=True)
    if args.command == "cat":
        return cmd_cat_optimize(args, config)
    if args.command == "synthesize":
        return cmd_synthesize(args, config)
    if args.command == "eval":
        if args.subcommand == "report":
            return cmd_eval_report(args, config)
        if args.subcommand == "dfkd":
            return cmd_eval_dfkd(args, config)
        return cmd_eval_bn_stability(args, config)
    if args.command in ("oracle-check", "oracle"):
        return cmd_oracle_check(args, config)
    if args.command == "sweep":
        return cmd_sweep_dag(args, config)
    if args.command == "ablate":
        return cmd_ablate(args, config)
    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    try:
        return run(argv)
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
