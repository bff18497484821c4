"""Command line interface.

Subcommands: synth-data, train, evaluate, caption, inspect-attention,
params, benchmark.  Exit status 0 on success, 1 on a runtime failure,
2 on a usage error.  ``GLIED_SEED`` overrides any configured seed.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import autograd as ag
from .benchmark import BenchmarkConfig, run_benchmark
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SceneSpec, Vocabulary, collate, file_fingerprint, load_dataset, structured_score, synth_generate, write_dataset
from .decoding import caption_batch
from .model import BOS, VARIANT_NAMES, AttentionTrace, GliedDecoder, ModelConfig, variant_flags
from .training import TrainConfig, encode_batch, evaluate, train_cross_entropy, train_scst

TRACE_TOLERANCE = 1e-9
REFERENCE_TOTALS = {"base": 12.3e6, "glied": 18.3e6}

# desk-scale model defaults; full sizes are available through --config
DESK_MODEL = {"d_e": 32, "d_h": 32, "n_heads": 4, "d_f": 64, "dropout": 0.1, "max_len": 28}
DESK_TRAIN = {"batch_size": 80, "max_epochs": 25, "lr": 1e-3, "patience": 5}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# output helpers


def dumps6(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with every float written with exactly six decimals."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise CliError(f"non-finite value {obj} in report")
        return f"{float(obj):.6f}"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps6(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(dumps6(v, indent, _level + 1) for v in obj) + "]"
        items = [pad + dumps6(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise CliError(f"cannot serialize {type(obj).__name__}")


def write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


@dataclass
class RunManifest:
    command: str
    seed: int | None
    config: dict
    dataset_fingerprint: str | None
    checkpoint: str | None
    tool: str = "glied"
    version: str = __version__

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def env_seed(seed: int) -> int:
    raw = os.environ.get("GLIED_SEED")
    if raw is None or raw == "":
        return seed
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"GLIED_SEED must be an integer, got {raw!r}") from None


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as err:
        raise CliError(f"cannot read {path}: {err}") from err


# ---------------------------------------------------------------------------
# dataset directories


def dataset_files(data_dir) -> dict:
    d = Path(data_dir)
    if not (d / "vocab.json").exists():
        raise CliError(f"{d} is not a dataset directory (no vocab.json)")
    return {"dir": d, "vocab": d / "vocab.json", "scenes": d / "scenes.json",
            **{s: d / f"{s}.jsonl" for s in ("train", "val", "test")}}


def load_split(files: dict, split: str, vocab: Vocabulary, d_r: int | None = None):
    path = files[split]
    if not path.exists():
        raise CliError(f"missing split file {path}")
    examples, report = load_dataset(path, vocab, d_r)
    if report.rejected:
        print(f"warning: {path.name}: {report.rejected} records rejected {dict(report.errors)}", file=sys.stderr)
    return examples


def data_fingerprint(files: dict) -> str:
    parts = [file_fingerprint(files[s]) for s in ("train", "val", "test") if files[s].exists()]
    return hashlib.sha256("".join(parts).encode()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    seed = env_seed(args.seed)
    ds = synth_generate(seed, args.n_train, args.n_val, args.n_test, args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val", "test"):
        write_dataset(out / f"{split}.jsonl", ds.split(split), ds.vocab)
    write_text(out / "vocab.json", json.dumps(ds.vocab.to_dict(), indent=1) + "\n")
    write_text(out / "scenes.json", json.dumps({k: v.to_dict() for k, v in ds.scenes.items()}) + "\n")
    files = dataset_files(out)
    config = {"n_train": args.n_train, "n_val": args.n_val, "n_test": args.n_test, "noise_sigma": args.noise}
    manifest = RunManifest("synth-data", seed, config, data_fingerprint(files), None)
    write_text(out / "manifest.json", dumps6(manifest.to_dict()) + "\n")
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} examples to {out}")
    return 0


def model_config_from(args, vocab_size: int, d_r: int, overrides: dict) -> ModelConfig:
    fields = dict(DESK_MODEL)
    fields.update(overrides)
    fields.update(vocab_size=vocab_size, d_r=d_r)
    fields.update(variant_flags(args.model))
    for flag in ("global_visual", "global_attribute", "local_distill"):
        if getattr(args, flag, False):
            fields[flag] = True
    try:
        return ModelConfig(**fields)
    except (TypeError, ValueError) as err:
        raise CliError(f"bad model config: {err}") from err


def cmd_train(args) -> int:
    files = dataset_files(args.data)
    vocab = Vocabulary.from_dict(read_json(files["vocab"]))
    cfg_file = read_json(args.config) if args.config else {}
    unknown = set(cfg_file) - {"model", "train"}
    if unknown:
        raise CliError(f"config file has unknown sections {sorted(unknown)}")
    train_fields = dict(DESK_TRAIN)
    train_fields.update(cfg_file.get("train", {}))
    if args.epochs is not None:
        train_fields["max_epochs"] = args.epochs
    train_fields["phase"] = args.phase
    train_fields["seed"] = env_seed(train_fields.get("seed", args.seed))
    try:
        tconf = TrainConfig(**train_fields)
    except (TypeError, ValueError) as err:
        raise CliError(f"bad train config: {err}") from err
    train = load_split(files, "train", vocab)
    if not train:
        raise CliError("training split is empty")
    d_r = train[0].regions.shape[1]
    val = load_split(files, "val", vocab, d_r) if files["val"].exists() else []
    if args.init:
        model, meta = load_checkpoint(args.init)
        if meta.get("vocab") != vocab.to_dict():
            raise CliError("initial checkpoint was trained with a different vocabulary")
    else:
        if args.phase == "scst":
            raise CliError("self-critical training starts from a cross-entropy checkpoint; pass --init")
        model = GliedDecoder(model_config_from(args, len(vocab), d_r, cfg_file.get("model", {})), seed=tconf.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        cider = "" if rec.cider is None else f" val_cider={rec.cider:.4f}"
        print(f"epoch {rec.epoch} loss={rec.loss:.4f}{cider}", file=sys.stderr)

    if args.phase == "xe":
        report = train_cross_entropy(model, train, tconf, val or None, vocab, on_epoch=progress)
    else:
        report = train_scst(model, train, tconf, vocab, val or None, on_epoch=progress)
    ckpt = out / "model.ckpt"
    manifest = RunManifest("train", tconf.seed, {"model": model.config.to_dict(), "train": tconf.to_dict()},
                           data_fingerprint(files), str(ckpt))
    report.checkpoint = str(ckpt)
    save_checkpoint(model, ckpt, {"vocab": vocab.to_dict(), "manifest": manifest.to_dict()})
    log = report.to_jsonl()
    write_text(out / "train_log.jsonl", log)
    from .plotting import training_curves
    training_curves([json.loads(line) for line in log.splitlines()], out / "curves.svg",
                    f"{model.config.variant} ({args.phase})")
    write_text(out / "manifest.json", dumps6(manifest.to_dict()) + "\n")
    best = "" if report.best_cider is None else f" best_val_cider={report.best_cider:.6f}"
    print(f"checkpoint {ckpt} best_epoch={report.best_epoch}{best}")
    return 0


def _load_for_eval(path):
    model, meta = load_checkpoint(path)
    if "vocab" not in meta:
        raise CliError(f"{path} carries no vocabulary; it was not written by `train`")
    return model, Vocabulary.from_dict(meta["vocab"]), meta


def cmd_evaluate(args) -> int:
    model, vocab, meta = _load_for_eval(args.checkpoint)
    files = dataset_files(args.data)
    examples = load_split(files, args.split, vocab, model.config.d_r)
    if not examples:
        raise CliError(f"split {args.split!r} is empty")
    metrics, texts = evaluate(model, examples, vocab, beam=args.beam)
    report = {"checkpoint": str(args.checkpoint), "split": args.split, "beam": args.beam,
              "n_images": len(examples), "metrics": metrics}
    if files["scenes"].exists():
        scenes = read_json(files["scenes"])
        specs = [SceneSpec.from_dict(scenes[e.image_id]) for e in examples if e.image_id in scenes]
        if len(specs) == len(examples):
            report["structured"] = structured_score(texts, specs)
    report["manifest"] = RunManifest("evaluate", meta.get("manifest", {}).get("seed"),
                                     {"beam": args.beam, "split": args.split},
                                     data_fingerprint(files), str(args.checkpoint)).to_dict()
    text = dumps6(report) + "\n"
    if args.report:
        write_text(args.report, text)
        tsv = "\n".join(f"{k}\t{v:.6f}" for k, v in metrics.items())
        write_text(Path(args.report).with_suffix(".tsv"), "metric\tvalue\n" + tsv + "\n")
    else:
        sys.stdout.write(text)
    for k, v in metrics.items():
        print(f"{k}\t{v:.6f}", file=sys.stderr)
    return 0


def _read_inputs(path, vocab: Vocabulary, d_r: int):
    examples, report = load_dataset(path, vocab, d_r)
    if report.rejected:
        print(f"warning: {report.rejected} input records rejected {dict(report.errors)}", file=sys.stderr)
    if not examples:
        raise CliError(f"no usable images in {path}")
    return examples


def cmd_caption(args) -> int:
    model, vocab, _ = _load_for_eval(args.checkpoint)
    examples = _read_inputs(args.input, vocab, model.config.d_r)
    lines = []
    with ag.no_grad():
        for start in range(0, len(examples), 100):
            chunk = examples[start:start + 100]
            hyps = caption_batch(model, encode_batch(model, collate(chunk)), args.beam)
            for ex, h in zip(chunk, hyps):
                lines.append(dumps6({"image_id": ex.image_id, "caption": " ".join(vocab.decode(h.words)),
                                     "logprob": h.logprob, "capped": h.capped}, indent=0).replace(",\n", ", ").replace("\n", ""))
    text = "\n".join(lines) + "\n"
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_inspect(args) -> int:
    model, vocab, _ = _load_for_eval(args.checkpoint)
    examples = _read_inputs(args.input, vocab, model.config.d_r)
    match = [e for e in examples if e.image_id == args.image_id]
    if not match:
        raise CliError(f"image {args.image_id!r} not found in {args.input}")
    ex = match[0]
    trace = AttentionTrace()
    with ag.no_grad():
        src = encode_batch(model, collate([ex]))
        hyp = caption_batch(model, src, args.beam)[0]
        # teacher-force the decoded caption so each row predicts one output word
        inputs = ([BOS] + hyp.tokens)[:len(hyp.tokens)]
        model.forward(np.array([inputs]), src, trace=trace)
    err = trace.max_normalization_error()
    if err > TRACE_TOLERANCE:
        raise CliError(f"attention rows sum to 1 only within {err:.3e}; nothing written")
    outputs = [vocab.itos[i] for i in hyp.tokens]
    attrs = [vocab.itos[i] for i in ex.attributes]
    regions = [f"r{i}" for i in range(ex.k)]
    distilled = [f"g{i}" for i in range(ex.k)]
    dists = {name: w[0].tolist() for name, _, w in trace.distributions()}
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"image_id": ex.image_id, "caption": " ".join(vocab.decode(hyp.words)), "outputs": outputs,
           "regions": regions, "attributes": attrs, "variant": model.config.variant, "distributions": dists}
    # full precision here, so the dumped rows still sum to 1 within tolerance
    write_text(out / "trace.json", json.dumps(doc, indent=1) + "\n")
    from . import plotting
    figures = []
    if trace.region_groups is not None:
        figures.append(plotting.region_grid(trace.region_groups[0].mean(axis=0), out / "region_groups.svg", regions))
    if trace.collocation:
        figures.append(plotting.collocation_bars(trace.collocation[0][0, 0], out / "collocation.svg", outputs, attrs))
    keys = {"visual": distilled if model.config.global_visual else regions, "attribute": attrs,
            "local_visual": regions, "local_attribute": attrs}
    for name, labels in keys.items():
        found = getattr(trace, name)
        if found:
            figures.append(plotting.timestep_heatmap(found[0][0, 0], out / f"{name}.svg", outputs, labels,
                                                     name.replace("_", " ") + " attention"))
    print(f"caption: {doc['caption']}")
    for f in figures:
        print(f"wrote {f}")
    return 0


def cmd_params(args) -> int:
    overrides = read_json(args.config).get("model", {}) if args.config else {}
    base_fields = ModelConfig.full_size("base").to_dict()
    base_fields.update(overrides)
    vocab_size = base_fields.pop("vocab_size")
    d_r = base_fields.pop("d_r")
    cfg = model_config_from(args, vocab_size, d_r, base_fields)
    model = GliedDecoder(cfg)
    total, parts = model.parameter_count()
    base_total, _ = GliedDecoder(dataclasses.replace(cfg, **variant_flags("base"))).parameter_count()
    print("component\tparameters")
    for name, n in parts.items():
        print(f"{name}\t{n}")
    print(f"total\t{total}")
    print(f"variant\t{cfg.variant}")
    print(f"base_total\t{base_total}")
    print(f"delta_vs_base\t{total - base_total}")
    ref = REFERENCE_TOTALS.get(cfg.variant)
    if ref is not None:
        within = abs(total - ref) <= 0.2 * ref
        print(f"reference_total\t{ref:.0f}\t{'within' if within else 'outside'} 20% band")
    print(f"reference_delta\t{REFERENCE_TOTALS['glied'] - REFERENCE_TOTALS['base']:.0f}")
    return 0


def cmd_benchmark(args) -> int:
    fields = read_json(args.config) if args.config else {}
    if args.seeds is not None:
        fields["seeds"] = list(range(args.seeds))
    if args.epochs is not None:
        fields["epochs"] = args.epochs
    try:
        cfg = BenchmarkConfig.from_dict(fields)
    except TypeError as err:
        raise CliError(f"bad benchmark config: {err}") from err
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_benchmark(cfg, args.cache, log=lambda s: print(s, file=sys.stderr))
    doc = result.to_dict()
    doc["manifest"] = RunManifest("benchmark", None, cfg.to_dict(), None, None).to_dict()
    write_text(out / "results.json", dumps6(doc) + "\n")
    rows = ["variant\tseed\tval_cider\ttest_cider\tbleu4\tcount\trelations\tscst_pre\tscst_post"]
    for c in result.cells:
        pre = "" if c.scst_pre_val is None else f"{c.scst_pre_val:.6f}"
        post = "" if c.scst_post_val is None else f"{c.scst_post_val:.6f}"
        rows.append(f"{c.variant}\t{c.seed}\t{c.val_cider:.6f}\t{c.test['CIDEr-D']:.6f}\t{c.test['BLEU-4']:.6f}\t"
                    f"{c.structured['count']:.6f}\t{c.structured['relations']:.6f}\t{pre}\t{post}")
    write_text(out / "results.tsv", "\n".join(rows) + "\n")
    from .plotting import benchmark_bars
    summary = result.summary()
    benchmark_bars(summary, out / "benchmark.svg")
    for v in cfg.variants:
        s = summary[v]
        print(f"{v}\tCIDEr-D {s['CIDEr-D']['mean']:.4f} +- {s['CIDEr-D']['se']:.4f}\t"
              f"count {s['count']['mean']:.4f}\trelations {s['relations']['mean']:.4f}")
    if "scst" in summary:
        print(f"scst\tval CIDEr-D {summary['scst']['pre_val']['mean']:.4f} -> {summary['scst']['post_val']['mean']:.4f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glied", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"glied {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate the synthetic scene dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-train", type=int, default=2000)
    s.add_argument("--n-val", type=int, default=200)
    s.add_argument("--n-test", type=int, default=200)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    def model_flags(sp):
        sp.add_argument("--model", default="glied", choices=sorted(VARIANT_NAMES.values()))
        sp.add_argument("--global-visual", action="store_true")
        sp.add_argument("--global-attribute", action="store_true")
        sp.add_argument("--local-distill", action="store_true")
        sp.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")

    s = sub.add_parser("train", help="cross-entropy or self-critical training")
    s.add_argument("--data", required=True, help="dataset directory from synth-data")
    model_flags(s)
    s.add_argument("--phase", choices=("xe", "scst"), default="xe")
    s.add_argument("--init", help="checkpoint to start from (required for scst)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="corpus metrics for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--beam", type=int, default=3)
    s.add_argument("--report", help="write the JSON report here (and a .tsv next to it)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("caption", help="caption every image of a dataset file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="dataset JSONL file")
    s.add_argument("--beam", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_caption)

    s = sub.add_parser("inspect-attention", help="dump one image's attention trace and heatmaps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="dataset JSONL file")
    s.add_argument("--image-id", required=True)
    s.add_argument("--beam", type=int, default=1)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("params", help="parameter count breakdown at full scale")
    model_flags(s)
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("benchmark", help="multi-seed base vs GLIED comparison on synthetic data")
    s.add_argument("--config", help="JSON with BenchmarkConfig fields")
    s.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    s.add_argument("--epochs", type=int)
    s.add_argument("--cache", help="JSON file for resumable per-cell results")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "beam", 1) is not None and getattr(args, "beam", 1) < 1:
        parser.error("--beam must be at least 1")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, ag.TrainingError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
