"""Command-line interface for reproducible experiment runs.

Subcommands: corpus generation, model training, top-k evaluation, saliency
export, the three analysis protocols, and a meta-command that chains the
whole pipeline and asserts the expected directional trends.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure,
4 trend-assertion failure.  Result tables are plain CSV with six-decimal
values and no timestamps, so a rerun at the same seed is byte-identical;
wall-clock timing appears only in training logs.
"""

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    denoise_eval,
    deletion_test,
    retention_summary,
    topk_accuracy,
)
from .augment import input_features, speaker_index, train
from .config import ConfigError, RunConfig, load_config
from .corpus import Corpus
from .layercam import fused_saliency, write_grid, write_pgm
from .model import load_checkpoint, save_checkpoint

INTERFERENCE_CHOICES = ("noise", "speech", "music")
MODE_CHOICES = ("base", "vanilla_da", "act_da")


class TrendFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def _fmt(value) -> str:
    if value is None:
        return "nan"
    return f"{float(value):.6f}"


def _write_table(path: Path, rows) -> None:
    """Canonical long-format table: condition, model, metric, value."""
    lines = ["condition,model,metric,value"]
    lines += [f"{c},{m},{k},{_fmt(v)}" for c, m, k, v in rows]
    path.write_text("\n".join(lines) + "\n")


def _write_summary(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


@contextlib.contextmanager
def _owned_results_dir(cfg: RunConfig, args, command: str):
    """Create/lock the results directory and drop a provenance record."""
    root = Path(getattr(args, "out", None) or cfg.paths.results)
    root.mkdir(parents=True, exist_ok=True)
    lock = root / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"results directory {root} is owned by another run; remove {lock} if stale"
        ) from None
    try:
        os.write(fd, command.encode())
        os.close(fd)
        provenance = {
            "command": command,
            "config": cfg.document,
            "seed": cfg.seed,
            "tool": "spkcam",
            "version": __version__,
        }
        _write_summary(root / "provenance.json", provenance)
        yield root
    finally:
        lock.unlink(missing_ok=True)


def _checkpoint_name(mode: str, interference) -> str:
    return mode if mode == "base" else f"{mode}-{interference}"


def _load_required_checkpoint(directory: Path, name: str):
    path = directory / f"{name}.ckpt"
    if not path.exists():
        raise RuntimeError(f"missing checkpoint {path}; run `spkcam train` first")
    model, _ = load_checkpoint(path)
    return model


def _cap(records, cfg: RunConfig):
    limit = cfg.analysis.max_utterances
    return records if limit is None else records[:limit]


def _clean_test_items(corpus: Corpus, label_of, cfg: RunConfig):
    recs = _cap(corpus.manifest.select(split="test", scenario="clean"), cfg)
    return [(corpus.waveform(r.utt_id), label_of[r.speaker]) for r in recs]


def _overlap_records(corpus: Corpus, kind: str, cfg: RunConfig):
    return _cap(
        corpus.manifest.select(scenario="overlap", interference_type=kind), cfg
    )


def _overlap_eval_items(corpus: Corpus, label_of, kind: str, cfg: RunConfig):
    """(mixture waveform, class) pairs for noisy accuracy."""
    recs = _overlap_records(corpus, kind, cfg)
    return [(corpus.waveform(r.utt_id), label_of[r.speaker]) for r in recs]


def _overlap_pair_items(corpus: Corpus, label_of, kind: str, cfg: RunConfig):
    """(clean, mixture, class) triples for denoising and deletion."""
    out = []
    for r in _overlap_records(corpus, kind, cfg):
        clean = corpus.waveform(r.source["base"])
        out.append((clean, corpus.waveform(r.utt_id), label_of[r.speaker]))
    return out


def _concat_items(corpus: Corpus, label_of, kind: str, cfg: RunConfig):
    recs = _cap(corpus.manifest.select(scenario="concat", interference_type=kind), cfg)
    return [
        (corpus.waveform(r.utt_id), corpus.concat_labels(r.utt_id), label_of[r.speaker])
        for r in recs
    ]


def _speaker_labels(corpus: Corpus, model):
    speakers, label_of = speaker_index(corpus)
    if model is not None and model.config.n_speakers != len(speakers):
        raise RuntimeError(
            f"checkpoint expects {model.config.n_speakers} speakers, "
            f"corpus has {len(speakers)}"
        )
    return speakers, label_of


# ---------------------------------------------------------------------------
# commands


def cmd_corpus(cfg: RunConfig, args) -> int:
    out = Path(args.out or cfg.paths.corpus)
    out.mkdir(parents=True, exist_ok=True)
    corpus = Corpus(cfg.corpus)
    path = out / "manifest.jsonl"
    corpus.manifest.write(path)
    print(
        f"manifest {path} records={len(corpus.manifest.records)} "
        f"speakers={cfg.corpus.n_speakers}"
    )
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    train_cfg = cfg.train_config(args.mode, args.interference)
    corpus = Corpus(cfg.corpus)
    out = Path(args.out or cfg.paths.checkpoints)
    out.mkdir(parents=True, exist_ok=True)
    name = _checkpoint_name(args.mode, args.interference)
    log_path = out / f"{name}.log.jsonl"
    with open(log_path, "w") as log_stream:
        result = train(corpus, train_cfg, cfg.model_config(), cfg.dsp, log_stream)
    ckpt = out / f"{name}.ckpt"
    save_checkpoint(result.model, ckpt, result.metadata)
    print(f"checkpoint {ckpt}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    corpus = Corpus(cfg.corpus)
    _, label_of = _speaker_labels(corpus, model)
    if args.scenario == "overlap":
        if args.interference is None:
            raise ConfigError("--interference is required with --scenario overlap")
        items = _overlap_eval_items(corpus, label_of, args.interference, cfg)
        condition = args.interference
    else:
        items = _clean_test_items(corpus, label_of, cfg)
        condition = "clean"
    table = topk_accuracy(model, items, cfg.dsp, cfg.analysis.eval_ks)
    model_name = Path(args.checkpoint).stem
    rows = [(condition, model_name, f"top{k}", v) for k, v in sorted(table.items())]
    with _owned_results_dir(cfg, args, "eval") as root:
        out_path = root / f"eval-{model_name}-{condition}.csv"
        _write_table(out_path, rows)
        _write_summary(
            root / f"eval-{model_name}-{condition}.json",
            {"condition": condition, "model": model_name,
             "accuracy": {str(k): v for k, v in table.items()},
             "n_utterances": len(items)},
        )
    for _, _, metric, value in rows:
        print(f"{condition} {model_name} {metric} {_fmt(value)}")
    return 0


def cmd_saliency(cfg: RunConfig, args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    corpus = Corpus(cfg.corpus)
    _, label_of = _speaker_labels(corpus, model)
    with _owned_results_dir(cfg, args, "saliency") as root:
        sal_dir = root / "saliency"
        sal_dir.mkdir(exist_ok=True)
        for utt_id in args.utt:
            rec = corpus.record(utt_id)
            cls = label_of[rec.speaker]
            feats = input_features(corpus.waveform(utt_id), cfg.dsp)
            map_ = fused_saliency(model, feats, cls)
            written = []
            if args.format in ("both", "grid"):
                p = sal_dir / f"{utt_id}.salgrid"
                write_grid(map_, p)
                written.append(p.name)
            if args.format in ("both", "pgm"):
                p = sal_dir / f"{utt_id}.pgm"
                write_pgm(map_, p)
                written.append(p.name)
            if args.format == "csv":
                p = sal_dir / f"{utt_id}.csv"
                np.savetxt(p, map_.values, fmt="%.6f", delimiter=",")
                written.append(p.name)
            print(f"saliency {utt_id} -> {' '.join(written)}")
    return 0


def _analysis_models(ckpt_dir: Path, kind: str) -> dict:
    return {
        "base": _load_required_checkpoint(ckpt_dir, "base"),
        f"vanilla_da-{kind}": _load_required_checkpoint(
            ckpt_dir, _checkpoint_name("vanilla_da", kind)
        ),
        f"act_da-{kind}": _load_required_checkpoint(
            ckpt_dir, _checkpoint_name("act_da", kind)
        ),
    }


def _retention_rows(cfg, corpus, label_of, kinds, models_for):
    rows, summary = [], {}
    for kind in kinds:
        items = _concat_items(corpus, label_of, kind, cfg)
        for name, model in models_for(kind).items():
            s = retention_summary(model, items, cfg.dsp, cfg.analysis.retention_rho)
            rows.append((kind, name, "spr", s.spr))
            rows.append((kind, name, "ipr", s.ipr))
            summary.setdefault(kind, {})[name] = {"spr": s.spr, "ipr": s.ipr}
    return rows, summary


def _denoise_rows(cfg, corpus, label_of, kinds, models_for):
    rows, summary = [], {}
    for kind in kinds:
        items = _overlap_pair_items(corpus, label_of, kind, cfg)
        result = denoise_eval(models_for(kind), items, cfg.dsp)
        for name in result.model_names:
            mean = result.mean(name)
            rows.append((kind, name, "snr_db", mean))
            summary.setdefault(kind, {})[name] = mean
    return rows, summary


def _deletion_rows(cfg, corpus, label_of, kinds, models_for, judge, curve_sink=None):
    rows, summary = [], {}
    thresholds = cfg.deletion_threshold_grid()
    for kind in kinds:
        pairs = _overlap_pair_items(corpus, label_of, kind, cfg)
        for name, model in models_for(kind).items():
            curve = deletion_test(model, judge, pairs, cfg.dsp, thresholds)
            rows.append((kind, name, "auc", curve.auc))
            summary.setdefault(kind, {})[name] = curve.auc
            if curve_sink is not None:
                curve_sink(kind, name, curve)
    return rows, summary


def cmd_analyze(cfg: RunConfig, args) -> int:
    corpus = Corpus(cfg.corpus)
    _, label_of = _speaker_labels(corpus, None)
    ckpt_dir = Path(args.checkpoints or cfg.paths.checkpoints)
    kinds = [args.interference] if args.interference else list(INTERFERENCE_CHOICES)
    models_cache = {}

    def models_for(kind):
        if kind not in models_cache:
            models_cache[kind] = _analysis_models(ckpt_dir, kind)
        return models_cache[kind]

    with _owned_results_dir(cfg, args, f"analyze-{args.protocol}") as root:
        if args.protocol == "spr-ipr":
            rows, summary = _retention_rows(cfg, corpus, label_of, kinds, models_for)
            _write_table(root / "spr_ipr.csv", rows)
            _write_summary(root / "spr_ipr.json", summary)
        elif args.protocol == "denoise":
            rows, summary = _denoise_rows(cfg, corpus, label_of, kinds, models_for)
            _write_table(root / "denoise.csv", rows)
            _write_summary(root / "denoise.json", summary)
        else:
            judge = _load_required_checkpoint(ckpt_dir, "base")
            curve_lines = ["condition,model,threshold,masked_fraction,accuracy"]

            def sink(kind, name, curve):
                for t, m, a in zip(
                    curve.thresholds, curve.masked_fractions, curve.accuracies
                ):
                    curve_lines.append(
                        f"{kind},{name},{_fmt(t)},{_fmt(m)},{_fmt(a)}"
                    )

            rows, summary = _deletion_rows(
                cfg, corpus, label_of, kinds, models_for, judge, sink
            )
            _write_table(root / "deletion.csv", rows)
            (root / "deletion_curves.csv").write_text("\n".join(curve_lines) + "\n")
            _write_summary(root / "deletion.json", summary)
    for c, m, k, v in rows:
        print(f"{c} {m} {k} {_fmt(v)}")
    return 0


# ---------------------------------------------------------------------------
# the full pipeline with trend assertions


def _trend(checks, ok: bool, text: str) -> None:
    checks.append((ok, f"{'PASS' if ok else 'FAIL'} {text}"))


def cmd_reproduce(cfg: RunConfig, args) -> int:
    corpus = Corpus(cfg.corpus)
    speakers, label_of = speaker_index(corpus)
    kinds = list(INTERFERENCE_CHOICES)

    ckpt_dir = Path(cfg.paths.checkpoints)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    corpus_dir = Path(cfg.paths.corpus)
    corpus_dir.mkdir(parents=True, exist_ok=True)
    corpus.manifest.write(corpus_dir / "manifest.jsonl")

    models = {}
    plan = [("base", None)] + [
        (mode, kind) for mode in ("vanilla_da", "act_da") for kind in kinds
    ]
    for mode, kind in plan:
        name = _checkpoint_name(mode, kind)
        print(f"training {name} ...", file=sys.stderr)
        train_cfg = cfg.train_config(mode, kind)
        with open(ckpt_dir / f"{name}.log.jsonl", "w") as log_stream:
            result = train(corpus, train_cfg, cfg.model_config(), cfg.dsp, log_stream)
        save_checkpoint(result.model, ckpt_dir / f"{name}.ckpt", result.metadata)
        models[name] = result.model

    def models_for(kind):
        return {
            "base": models["base"],
            f"vanilla_da-{kind}": models[f"vanilla_da-{kind}"],
            f"act_da-{kind}": models[f"act_da-{kind}"],
        }

    with _owned_results_dir(cfg, args, "reproduce-paper-trends") as root:
        ks = cfg.analysis.eval_ks
        clean_items = _clean_test_items(corpus, label_of, cfg)
        acc = {}  # (condition, model) -> top-1
        table1_rows = []
        for name, model in models.items():
            table = topk_accuracy(model, clean_items, cfg.dsp, ks)
            acc[("clean", name)] = table[min(ks)]
            table1_rows += [("clean", name, f"top{k}", v) for k, v in sorted(table.items())]
        for kind in kinds:
            noisy_items = _overlap_eval_items(corpus, label_of, kind, cfg)
            for name, model in models_for(kind).items():
                table = topk_accuracy(model, noisy_items, cfg.dsp, ks)
                acc[(kind, name)] = table[min(ks)]
                table1_rows += [
                    (kind, name, f"top{k}", v) for k, v in sorted(table.items())
                ]
        _write_table(root / "table1.csv", table1_rows)

        retention_rows, retention = _retention_rows(
            cfg, corpus, label_of, kinds, models_for
        )
        _write_table(root / "spr_ipr.csv", retention_rows)
        denoise_rows, denoise = _denoise_rows(cfg, corpus, label_of, kinds, models_for)
        _write_table(root / "denoise.csv", denoise_rows)
        deletion_rows, deletion = _deletion_rows(
            cfg, corpus, label_of, kinds, models_for, models["base"]
        )
        _write_table(root / "deletion.csv", deletion_rows)
        _write_summary(
            root / "summary.json",
            {
                "accuracy_top1": {f"{c}/{m}": v for (c, m), v in sorted(acc.items())},
                "retention": retention,
                "denoise": denoise,
                "deletion_auc": deletion,
            },
        )

        checks = []
        base_clean = acc[("clean", "base")]
        _trend(checks, base_clean >= 0.90, f"base clean top-1 >= 0.90 ({_fmt(base_clean)})")
        for kind in kinds:
            b = acc[(kind, "base")]
            v = acc[(kind, f"vanilla_da-{kind}")]
            _trend(
                checks,
                v >= b + 0.15,
                f"{kind}: vanilla DA noisy top-1 beats base by >= 15 points "
                f"({_fmt(v)} vs {_fmt(b)})",
            )
        a_sp = acc[("speech", "act_da-speech")]
        v_sp = acc[("speech", "vanilla_da-speech")]
        _trend(
            checks,
            a_sp >= v_sp - 0.01,
            f"speech: act DA noisy top-1 >= vanilla within 1 point "
            f"({_fmt(a_sp)} vs {_fmt(v_sp)})",
        )
        for kind in kinds:
            r = retention[kind]
            base_ipr = r["base"]["ipr"]
            van_ipr = r[f"vanilla_da-{kind}"]["ipr"]
            act_ipr = r[f"act_da-{kind}"]["ipr"]
            _trend(
                checks,
                van_ipr < base_ipr,
                f"{kind}: IPR vanilla < base ({_fmt(van_ipr)} vs {_fmt(base_ipr)})",
            )
            _trend(
                checks,
                act_ipr < base_ipr,
                f"{kind}: IPR act < base ({_fmt(act_ipr)} vs {_fmt(base_ipr)})",
            )
            for name, vals in r.items():
                _trend(
                    checks,
                    vals["spr"] >= 0.8,
                    f"{kind}: SPR of {name} >= 0.8 ({_fmt(vals['spr'])})",
                )
        sp = retention["speech"]
        _trend(
            checks,
            sp["act_da-speech"]["ipr"] <= sp["vanilla_da-speech"]["ipr"],
            f"speech: IPR act <= vanilla ({_fmt(sp['act_da-speech']['ipr'])} vs "
            f"{_fmt(sp['vanilla_da-speech']['ipr'])})",
        )
        for kind in kinds:
            d = denoise[kind]
            noisy = d["noisy"]
            base_snr = d["base"]
            van_snr = d[f"vanilla_da-{kind}"]
            _trend(
                checks,
                noisy < base_snr < van_snr,
                f"{kind}: masked SNR ordering noisy < base < vanilla "
                f"({_fmt(noisy)} < {_fmt(base_snr)} < {_fmt(van_snr)})",
            )
        _trend(
            checks,
            denoise["speech"]["act_da-speech"] >= denoise["speech"]["vanilla_da-speech"],
            f"speech: act masked SNR >= vanilla "
            f"({_fmt(denoise['speech']['act_da-speech'])} vs "
            f"{_fmt(denoise['speech']['vanilla_da-speech'])})",
        )
        for kind in kinds:
            d = deletion[kind]
            _trend(
                checks,
                d[f"vanilla_da-{kind}"] < d["base"],
                f"{kind}: deletion AUC vanilla < base "
                f"({_fmt(d[f'vanilla_da-{kind}'])} vs {_fmt(d['base'])})",
            )
            _trend(
                checks,
                d[f"act_da-{kind}"] < d["base"],
                f"{kind}: deletion AUC act < base "
                f"({_fmt(d[f'act_da-{kind}'])} vs {_fmt(d['base'])})",
            )

        lines = [line for _, line in checks]
        (root / "trends.txt").write_text("\n".join(lines) + "\n")
        for line in lines:
            print(line)
        failed = [line for ok, line in checks if not ok]
    if failed:
        raise TrendFailure(f"{len(failed)} of {len(checks)} trend assertions failed")
    print(f"all {len(checks)} trend assertions passed")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spkcam",
        description="Speaker-ID training, interference augmentation, and "
        "saliency analysis experiments.",
    )
    parser.add_argument("--version", action="version", version=f"spkcam {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration (defaults apply if omitted)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory override")

    p = sub.add_parser("corpus", help="generate the synthetic corpus manifest")
    common(p)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--mode", required=True, choices=MODE_CHOICES)
    p.add_argument("--interference", choices=INTERFERENCE_CHOICES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-k accuracy of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", choices=("clean", "overlap"), default="clean")
    p.add_argument("--interference", choices=INTERFERENCE_CHOICES)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", help="export saliency maps for utterances")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--utt", action="append", required=True, help="utterance id (repeatable)")
    p.add_argument("--format", choices=("both", "grid", "pgm", "csv"), default="both")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("analyze", help="run one analysis protocol")
    common(p)
    p.add_argument("protocol", choices=("spr-ipr", "denoise", "deletion"))
    p.add_argument("--interference", choices=INTERFERENCE_CHOICES,
                   help="restrict to one interference type")
    p.add_argument("--checkpoints", help="checkpoint directory override")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser(
        "reproduce-paper-trends",
        help="corpus -> train all modes -> analyze, asserting directional trends",
    )
    common(p)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except TrendFailure as exc:
        print(f"error: trends: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # CLI boundary: one parseable line per failure
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
