"""Command-line entry point wiring the pipeline together.

Exit codes: 0 success, 1 runtime failure, 2 unknown command or unparseable
arguments, 3 validation failure (the message names the offending flag or
config field). ``SUR_SEED`` in the environment overrides the seed of any
JSON config that gets loaded.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from . import dataset as ds
from . import report as report_mod
from .adapter import adapter_forward, blend_condition, load_adapter
from .config import load_config
from .diffusion import (
    condition_pool,
    ddpm_sample,
    load_denoiser,
    make_schedule,
    new_denoiser,
    pretrain_denoiser,
    save_denoiser,
)
from .encoders import (
    D_EN,
    L_MAX,
    LLM_PROFILES,
    VOCAB_SIZE,
    Vocabulary,
    build_bundle,
    encode_text,
    load_bundle,
    save_bundle,
    tokenize,
)
from .errors import ConfigError, SurError
from .evaluation import load_suite, run_eval
from .tnsio import read_json, write_json, write_tns
from .trainer import TrainConfig, run_training


def _grammar_texts() -> list[str]:
    words = list(ds.COUNT_WORDS) + list(ds.COLOR_LEVELS) + list(ds.ACTIONS)
    for obj in ds.OBJECTS:
        words += [obj, obj + "s"]
    return [" ".join(words), ds.QUALITY_SUFFIX]


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name.replace("-", "_")) is None:
            raise ConfigError(f"--{name} is required")


def _load_model(checkpoint_dir):
    den, sched = load_denoiser(checkpoint_dir)
    bundle = load_bundle(Path(checkpoint_dir) / "encoders")
    return den, sched, bundle


def _prompt_condition(bundle, prompt, adapter_dir, eta):
    ids, _ = tokenize(prompt, bundle.vocab, bundle.l_max)
    enc = encode_text(bundle.text, ids)
    if adapter_dir in (None, "none"):
        return condition_pool(enc).data
    params, _, loss_cfg, _ = load_adapter(adapter_dir)
    out = adapter_forward(params, enc)
    c_prime = blend_condition(out["c_llm"], enc, loss_cfg.eta if eta is None else eta)
    return condition_pool(c_prime).data


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_init_encoders(args) -> int:
    _require(args, "seed", "llm-profile", "out")
    if args.data is not None:
        records = ds.read_manifest(args.data)
        texts = [f"{r.simple_prompt} {r.complex_prompt}" for r in records]
    else:
        texts = _grammar_texts()
    vocab = Vocabulary.from_texts(texts, max_size=args.vocab_size)
    bundle = build_bundle(args.seed, args.llm_profile, vocab,
                          d_en=args.d_en, l_max=args.l_max)
    save_bundle(bundle, args.out)
    print(f"encoders: profile={args.llm_profile} vocab={len(vocab)} -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    _require(args, "seed", "n", "out")
    records = ds.synth_corpus(args.seed, args.n, args.out)
    print(f"synth: {len(records)} records -> {args.out}")
    return 0


def cmd_clean(args) -> int:
    _require(args, "data", "encoders")
    bundle = load_bundle(args.encoders)
    records = ds.read_manifest(args.data)
    drop_ids = None
    if args.drop_ids is not None:
        drop_ids = {ln.strip() for ln in Path(args.drop_ids).read_text().splitlines() if ln.strip()}
    summary = ds.clean_gate(records, ds.SimilarityScorer(bundle), args.data, drop_ids)
    ds.write_manifest(args.data, records)
    write_json(Path(args.data) / "clean_summary.json", summary)
    print(f"clean: retained {summary['retained']}/{summary['input']}")
    return 0


def cmd_embed(args) -> int:
    _require(args, "data", "encoders")
    bundle = load_bundle(args.encoders)
    layer = args.layer if args.layer is not None else bundle.llm.n_layers
    records = ds.read_manifest(args.data)
    cache = ds.build_knowledge_cache(records, bundle, layer, args.data)
    ds.write_manifest(args.data, records)
    print(f"embed: layer {layer}, {len(cache['vectors'])} vectors cached")
    return 0


def cmd_stats(args) -> int:
    _require(args, "data", "out")
    stats = ds.corpus_stats(ds.read_manifest(args.data))
    write_json(args.out, stats.to_json_dict())
    print(f"stats: {stats.record_count} records -> {args.out}")
    return 0


def cmd_pretrain_denoiser(args) -> int:
    _require(args, "data", "encoders", "out")
    bundle = load_bundle(args.encoders)
    records = ds.read_manifest(args.data)
    examples = []
    for rec in records:
        if rec.retained is False:
            continue
        ids, _ = tokenize(rec.simple_prompt, bundle.vocab, bundle.l_max)
        enc = encode_text(bundle.text, ids)
        examples.append((ds.load_image(args.data, rec), condition_pool(enc).data))
    sched = make_schedule(args.schedule_steps, args.sigma_min, args.sigma_max)
    den = new_denoiser(args.seed, resolution=bundle.resolution,
                       d_cond=bundle.d_en, hidden=args.hidden)
    history = pretrain_denoiser(den, sched, examples, steps=args.steps,
                                batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    save_denoiser(den, sched, args.out)
    shutil.copytree(args.encoders, Path(args.out) / "encoders", dirs_exist_ok=True)
    write_json(Path(args.out) / "pretrain_log.json",
               {"steps": args.steps, "first_loss": history[0], "final_loss": history[-1]})
    print(f"pretrain: loss {history[0]:.4f} -> {history[-1]:.4f} over {args.steps} steps")
    return 0


def cmd_train(args) -> int:
    _require(args, "config", "data", "encoders", "denoiser", "out")
    cfg = load_config(args.config)
    state, log = run_training(cfg.train, args.data, args.encoders, args.denoiser, args.out)
    print(f"train: {state.step} steps, final l_total {log[-1]['l_total']:.6f} -> {args.out}")
    return 0


def cmd_sample(args) -> int:
    _require(args, "checkpoint", "prompt", "seed", "out")
    den, sched, bundle = _load_model(args.checkpoint)
    cond = _prompt_condition(bundle, args.prompt, args.adapter, args.eta)
    image = ddpm_sample(den, sched, cond, args.seed)
    write_tns(args.out, image.data)
    print(f"sample: seed {args.seed} -> {args.out}")
    return 0


def _parse_quality_scores(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item or ":" not in item.split("=", 1)[1]:
            raise ConfigError(
                f"--quality-scores expects METRIC=BASELINE_FILE:ADAPTER_FILE, got {item!r}")
        metric, files = item.split("=", 1)
        base_file, adapter_file = files.split(":", 1)
        out[metric] = (base_file, adapter_file)
    return out


def _parse_labels(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--labels expects SIDE=FILE, got {item!r}")
        side, path = item.split("=", 1)
        if side not in ("baseline", "adapter"):
            raise ConfigError(f"--labels side must be baseline or adapter, got {side!r}")
        out[side] = {k: bool(v) for k, v in read_json(path).items()}
    return out


def cmd_eval(args) -> int:
    _require(args, "baseline", "suite", "out")
    suite = load_suite(args.suite, images_per_prompt=args.images_per_prompt)
    adapter_dir = None if args.adapter in (None, "none") else args.adapter
    report = run_eval(args.baseline, adapter_dir, suite,
                      quality_scores=_parse_quality_scores(args.quality_scores),
                      seed=args.seed, eta=args.eta,
                      labels=_parse_labels(args.labels) or None)
    write_json(args.out, report)
    figure = Path(args.out).with_suffix(".svg")
    report_mod.render_eval_summary(args.out, figure)
    acc = report["semantic_accuracy"]["adapter"]["per_category"]
    print(f"eval: clip {report['clip_score']['baseline']:.3f}/"
          f"{report['clip_score']['adapter']:.3f}, adapter acc {acc} -> {args.out}")
    return 0


def cmd_report(args) -> int:
    _require(args, "in", "out")
    report_mod.render(getattr(args, "in"), args.out)
    print(f"report: {args.out} (+ .csv)")
    return 0


def _ensure_cache(data_dir, bundle, layer) -> None:
    cache = Path(data_dir) / ds.knowledge_cache_dir(layer) / "cache.json"
    if not cache.exists():
        records = ds.read_manifest(data_dir)
        ds.build_knowledge_cache(records, bundle, layer, data_dir)
        ds.write_manifest(data_dir, records)


def _parse_ablate_flags(text: str) -> tuple[bool, bool]:
    state = {"llm": True, "cp": True}
    for part in text.split(","):
        if "=" not in part:
            raise ConfigError(f"--flags expects llm=on|off,cp=on|off, got {text!r}")
        key, value = part.split("=", 1)
        if key not in state or value not in ("on", "off"):
            raise ConfigError(f"--flags expects llm=on|off,cp=on|off, got {text!r}")
        state[key] = value == "on"
    return state["llm"], state["cp"]


def cmd_ablate(args) -> int:
    _require(args, "data", "encoders", "denoiser", "out")
    base = load_config(args.config).train if args.config else TrainConfig()
    base = replace(base, steps=args.steps)
    bundle = load_bundle(args.encoders)
    last = bundle.llm.n_layers
    out = Path(args.out)

    def one_run(name, cfg):
        layer = cfg.llm_layer if cfg.llm_layer is not None else last
        _ensure_cache(args.data, bundle, layer)
        run_dir = out / name
        state, log = run_training(cfg, args.data, args.encoders, args.denoiser, run_dir)
        return {
            "name": name,
            "flags": {"llm": cfg.loss.enable_llm, "cp": cfg.loss.enable_cp},
            "llm_layer": layer,
            "steps": cfg.steps,
            "final": log[-1],
            "out": name,
        }

    runs = {"flag_runs": [], "layer_runs": []}
    if args.flags is not None:
        llm_on, cp_on = _parse_ablate_flags(args.flags)
        cfg = replace(base, loss=replace(base.loss, enable_llm=llm_on, enable_cp=cp_on))
        runs["flag_runs"].append(one_run(f"flags_llm_{'on' if llm_on else 'off'}_cp_{'on' if cp_on else 'off'}", cfg))
    else:
        for llm_on, cp_on in ((False, False), (True, False), (False, True), (True, True)):
            cfg = replace(base, loss=replace(base.loss, enable_llm=llm_on, enable_cp=cp_on))
            name = f"flags_llm_{'on' if llm_on else 'off'}_cp_{'on' if cp_on else 'off'}"
            runs["flag_runs"].append(one_run(name, cfg))
        if args.layers is not None:
            layers = [int(x) for x in args.layers.split(",")]
        else:
            layers = sorted({1, (last + 1) // 2, last})
        for layer in layers:
            cfg = replace(base, llm_layer=layer)
            runs["layer_runs"].append(one_run(f"layer_{layer:02d}", cfg))
    write_json(out / "ablation.json", runs)
    print(f"ablate: {len(runs['flag_runs'])} flag runs, {len(runs['layer_runs'])} layer runs -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sur",
        description="Toy text-conditioned diffusion fine-tuning workbench",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="reserved; desk-scale sizes run single-threaded")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("init-encoders", help="materialize frozen encoder bundle from a seed")
    p.add_argument("--seed", type=int)
    p.add_argument("--llm-profile", choices=sorted(LLM_PROFILES))
    p.add_argument("--out")
    p.add_argument("--data", help="harvest the vocabulary from this dataset")
    p.add_argument("--d-en", type=int, default=D_EN)
    p.add_argument("--l-max", type=int, default=L_MAX)
    p.add_argument("--vocab-size", type=int, default=VOCAB_SIZE)
    p.set_defaults(func=cmd_init_encoders)

    p = sub.add_parser("synth", help="generate a synthetic triplet corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("clean", help="similarity-gate the dataset")
    p.add_argument("--data")
    p.add_argument("--encoders")
    p.add_argument("--drop-ids", help="file of record ids to drop (manual pass)")
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("embed", help="cache pooled language-model vectors")
    p.add_argument("--data")
    p.add_argument("--encoders")
    p.add_argument("--layer", type=int, help="default: the profile's last layer")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("stats", help="prompt-length and token-frequency report")
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pretrain-denoiser", help="fit and freeze the toy denoiser")
    p.add_argument("--data")
    p.add_argument("--encoders")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--schedule-steps", type=int, default=50)
    p.add_argument("--sigma-min", type=float, default=0.02)
    p.add_argument("--sigma-max", type=float, default=0.999)
    p.add_argument("--hidden", type=int, default=128)
    p.set_defaults(func=cmd_pretrain_denoiser)

    p = sub.add_parser("train", help="fine-tune an adapter")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--encoders")
    p.add_argument("--denoiser")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate one image from a prompt")
    p.add_argument("--checkpoint")
    p.add_argument("--adapter", default="none")
    p.add_argument("--prompt")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--eta", type=float, help="override the adapter blend weight")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="paired evaluation of baseline vs adapter")
    p.add_argument("--baseline")
    p.add_argument("--adapter", default="none")
    p.add_argument("--suite")
    p.add_argument("--images-per-prompt", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quality-scores", action="append", metavar="METRIC=BASE:ADAPTER")
    p.add_argument("--labels", action="append", metavar="SIDE=FILE")
    p.add_argument("--eta", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render figures and CSV from logs or reports")
    p.add_argument("--in", dest="in")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="loss-term toggles and layer sweep")
    p.add_argument("--data")
    p.add_argument("--encoders")
    p.add_argument("--denoiser")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--flags", metavar="llm=on|off,cp=on|off")
    p.add_argument("--layers", metavar="CSV", help="layer sweep indices")
    p.set_defaults(func=cmd_ablate)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "command", None) is None or not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (SurError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
