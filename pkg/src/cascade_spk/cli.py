"""Command-line driver for the three-stage cascade.

Workdir layout::

    corpus/{all,train,eval}.jsonl, corpus/feats/, corpus/trials.txt
    pretrain/{unfiltered,filtered}/{teacher,student}.cspk, loss.jsonl
    filter/{filtered.jsonl,confidence.jsonl}
    finetune/<tag>/{model.cspk,train.jsonl}
    scores/<tag>.txt
    reports/<tag>.json
    runs.jsonl

Exit codes: 0 success, 2 configuration error, 3 input-artifact error,
4 numerical failure, 5 internal error.
"""

import argparse
import dataclasses
import json
import logging
import os
import struct
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from . import __version__
from . import encoder as enc
from . import scoring
from .config import config_hash, load_config, to_dict
from .corpus import (
    FEATURE_MAGIC,
    atomic_write_bytes,
    generate_corpus,
    parse_features,
    read_manifest,
    record_from_json,
    split_by_label,
    write_manifest,
)
from .dino import pretrain, save_pretrain_outputs
from .errors import (
    CascadeError,
    ConfigError,
    FormatError,
    InvalidInputError,
    InvalidRoleError,
    NumericalFailureError,
)
from .filtering import filter_manifest, quality_report, read_confidence_file, write_outputs
from .finetune import finetune, save_finetuned, save_train_log
from .numerics import Rng

log = logging.getLogger("cascade_spk")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC, EXIT_INTERNAL = 0, 2, 3, 4, 5
INIT_TO_ROLE = {"teacher": "teacher", "student": "student", "random": None}
INIT_TO_CONFIG = {"teacher": "teacher_ckpt", "student": "student_ckpt", "random": "random"}
ABLATION = [(f, i) for f in ("filtered", "unfiltered") for i in ("teacher", "student")]


class WorkdirLockedError(CascadeError):
    """Another invocation holds the workdir lock."""


@dataclass
class RunRecord:
    stage: str
    config_hash: str
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    wall_time: float = 0.0
    tool_version: str = __version__


class Workdir:
    def __init__(self, root):
        self.root = Path(root)

    def __truediv__(self, other):
        return self.root / other

    corpus = property(lambda self: self.root / "corpus")
    all_manifest = property(lambda self: self.corpus / "all.jsonl")
    train_manifest = property(lambda self: self.corpus / "train.jsonl")
    eval_manifest = property(lambda self: self.corpus / "eval.jsonl")
    trials = property(lambda self: self.corpus / "trials.txt")
    filtered_manifest = property(lambda self: self.root / "filter" / "filtered.jsonl")
    confidence = property(lambda self: self.root / "filter" / "confidence.jsonl")

    def pretrain_dir(self, filtered):
        return self.root / "pretrain" / ("filtered" if filtered else "unfiltered")

    def pretrained(self, filtered, role):
        return self.pretrain_dir(filtered) / f"{role}.cspk"

    def finetune_dir(self, tag):
        return self.root / "finetune" / tag

    def scores(self, tag):
        return self.root / "scores" / f"{tag}.txt"

    def report(self, tag):
        return self.root / "reports" / f"{tag}.json"


def model_tag(init, filtered, raw=False):
    tag = "random" if init == "random" else f"{'filtered' if filtered else 'unfiltered'}_{init}"
    return f"{tag}_raw" if raw else tag


@contextmanager
def workdir_lock(root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lock = root / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise WorkdirLockedError(f"{lock} exists; another run is using this workdir") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def append_run_record(wd, record):
    line = (json.dumps(asdict(record), sort_keys=True) + "\n").encode("utf-8")
    fd = os.open(wd / "runs.jsonl", os.O_CREAT | os.O_APPEND | os.O_WRONLY, 0o644)
    try:
        os.write(fd, line)
    finally:
        os.close(fd)


def _require(*paths):
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"missing input artifact: {p}")


class Stage:
    """Times a stage and appends its RunRecord when it completes."""

    def __init__(self, wd, cfg, name, inputs):
        _require(*inputs)
        self.wd, self.name = wd, name
        self.record = RunRecord(stage=name, config_hash=config_hash(cfg),
                                inputs=[str(p) for p in inputs])

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.record.wall_time = round(time.perf_counter() - self.t0, 3)
            append_run_record(self.wd, self.record)
        return False

    def done(self, *outputs):
        self.record.outputs = [str(p) for p in outputs]


# -- stages ------------------------------------------------------------------

def cmd_generate(cfg, wd):
    with Stage(wd, cfg, "generate", []) as st:
        records = generate_corpus(cfg.corpus, wd.corpus, labeled=True)
        train, evl = split_by_label(records, cfg.scoring.eval_speakers)
        write_manifest(wd.all_manifest, records)
        write_manifest(wd.train_manifest, train)
        write_manifest(wd.eval_manifest, evl)
        trials = scoring.make_trials(evl, cfg.scoring.num_trials, cfg.scoring.enroll_per_trial,
                                     Rng(cfg.scoring.seed))
        scoring.write_trials(wd.trials, trials)
        st.done(wd.all_manifest, wd.train_manifest, wd.eval_manifest, wd.trials)
    return {"utterances": len(records), "train": len(train), "eval": len(evl),
            "trials": len(trials)}


def cmd_pretrain(cfg, wd, use_filtered=False):
    manifest = wd.filtered_manifest if use_filtered else wd.train_manifest
    out = wd.pretrain_dir(use_filtered)
    with Stage(wd, cfg, "pretrain", [manifest]) as st:
        result = pretrain(manifest, cfg.encoder, cfg.dino)
        paths = save_pretrain_outputs(result, cfg.encoder, out)
        st.done(*paths)
    return {"steps": len(result.log), "segments_used": result.used,
            "segments_skipped": result.skipped,
            "final_loss": result.log[-1]["loss"] if result.log else None}


def cmd_filter(cfg, wd, quality=False):
    ckpt = Path(cfg.filter.extractor_checkpoint or wd.pretrained(False, "teacher"))
    with Stage(wd, cfg, "filter", [wd.train_manifest, ckpt]) as st:
        params = enc.load_checkpoint(ckpt).backbone()
        result = filter_manifest(wd.train_manifest, cfg.filter, params=params)
        outputs = list(write_outputs(result, wd / "filter"))
        if quality:
            report = quality_report(result.segments, read_manifest(wd.train_manifest))
            path = wd / "filter" / "quality_report.json"
            atomic_write_bytes(path, (json.dumps(report, sort_keys=True) + "\n").encode("utf-8"))
            outputs.append(path)
        st.done(*outputs)
    return result.summary


def cmd_finetune(cfg, wd, init="teacher", use_filtered=False):
    tag = model_tag(init, use_filtered)
    role = INIT_TO_ROLE[init]
    ckpt_path = None
    if role is not None:
        ckpt_path = Path(cfg.finetune.init_checkpoint or wd.pretrained(use_filtered, role))
    inputs = [wd.train_manifest] + ([ckpt_path] if ckpt_path else [])
    out = wd.finetune_dir(tag)
    with Stage(wd, cfg, "finetune", inputs) as st:
        ft_cfg = dataclasses.replace(cfg.finetune, init=INIT_TO_CONFIG[init])
        checkpoint = enc.load_checkpoint(ckpt_path) if ckpt_path else None
        result = finetune(wd.train_manifest, ft_cfg, checkpoint=checkpoint, enc_cfg=cfg.encoder)
        save_finetuned(out / "model.cspk", result)
        save_train_log(out / "train.jsonl", result.log)
        st.done(out / "model.cspk", out / "train.jsonl")
    last = result.log[-1] if result.log else {}
    return {"tag": tag, "steps": len(result.log), "final_loss": last.get("loss"),
            "train_accuracy": last.get("train_accuracy")}


def cmd_score(cfg, wd, init="teacher", use_filtered=False, allow_raw=False, checkpoint=None):
    raw = allow_raw and checkpoint is None
    tag = model_tag(init, use_filtered, raw=raw)
    if checkpoint is not None:
        ckpt_path = Path(checkpoint)
        tag = ckpt_path.stem if ckpt_path.stem not in ("model", "teacher", "student") \
            else f"{ckpt_path.parent.name}_{ckpt_path.stem}"
    elif raw:
        if init == "random":
            raise ConfigError("raw scoring needs --init teacher or student")
        ckpt_path = wd.pretrained(use_filtered, INIT_TO_ROLE[init])
    else:
        ckpt_path = wd.finetune_dir(tag) / "model.cspk"
    inputs = [ckpt_path, wd.eval_manifest, wd.trials]
    if cfg.scoring.asnorm_enabled:
        inputs.append(wd.train_manifest)
    with Stage(wd, cfg, "score", inputs) as st:
        params = scoring.scoring_params(enc.load_checkpoint(ckpt_path), allow_raw=allow_raw)
        trials = scoring.read_trials(wd.trials)
        evl = read_manifest(wd.eval_manifest)
        embs = scoring.extract_embeddings(params, wd.eval_manifest, evl, cfg.encoder.feature_dim)
        scores = scoring.score_trials(trials, embs)
        if cfg.scoring.asnorm_enabled:
            cohort = scoring.cohort_embeddings(params, wd.train_manifest,
                                               read_manifest(wd.train_manifest),
                                               cfg.encoder.feature_dim)
            scores = scoring.as_norm(scores, embs, cohort, cfg.scoring.asnorm_k)
        scoring.write_scores(wd.scores(tag), scores)
        st.done(wd.scores(tag))
    return {"tag": tag, "trials": len(trials), "scores": str(wd.scores(tag))}


def cmd_eval(cfg, wd, tag=None, score_file=None):
    path = Path(score_file) if score_file else wd.scores(tag)
    tag = tag or path.stem
    with Stage(wd, cfg, "eval", [path]) as st:
        scores = scoring.read_scores(path)
        normalized = cfg.scoring.asnorm_enabled and scores.normalized is not None
        report = scoring.metrics_report(scores, cfg.scoring, normalized=normalized, tag=tag)
        out = wd.report(tag)
        atomic_write_bytes(out, (report.to_json() + "\n").encode("utf-8"))
        st.done(out)
    return asdict(report)


def cmd_run_all(cfg, wd):
    """generate, pretrain and filter, then the filtering x init ablation grid."""
    summary = {"generate": cmd_generate(cfg, wd),
               "pretrain_unfiltered": cmd_pretrain(cfg, wd, use_filtered=False),
               "filter": cmd_filter(cfg, wd),
               "pretrain_filtered": cmd_pretrain(cfg, wd, use_filtered=True),
               "reports": {}}
    for variant, init in ABLATION:
        filtered = variant == "filtered"
        cmd_finetune(cfg, wd, init=init, use_filtered=filtered)
        tag = cmd_score(cfg, wd, init=init, use_filtered=filtered)["tag"]
        summary["reports"][tag] = cmd_eval(cfg, wd, tag=tag)
    return summary


# -- inspect -----------------------------------------------------------------

RECOGNIZED = {"CSPF": "feature file", "CSPK": "checkpoint"}


def _inspect_features(path, data):
    seq = parse_features(data, name=str(path))
    version = struct.unpack_from("<I", data, 4)[0]
    return [f"format: CSPF feature file", f"version: {version}",
            f"frames: {seq.shape[0]}", f"dims: {seq.shape[1]}",
            f"mean: {float(seq.mean()):.6g}", f"std: {float(seq.std()):.6g}"]


def _inspect_checkpoint(path, data):
    ck = enc.parse_checkpoint(data, name=str(path))
    version = struct.unpack_from("<I", data, 4)[0]
    lines = [f"format: CSPK checkpoint", f"version: {version}", f"role: {ck.role}",
             f"config: {json.dumps(asdict(ck.config), sort_keys=True)}"]
    if ck.num_classes is not None:
        lines.append(f"num_classes: {ck.num_classes}")
    lines.append(f"tensors: {len(ck.params)}")
    for name, t in ck.params.items():
        lines.append(f"  {name} {list(t.shape)} norm={float(np.linalg.norm(t)):.6g}")
    return lines


def _inspect_text(path, text):
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        objs = [json.loads(l) for l in lines]
    except json.JSONDecodeError:
        objs = None
    if objs is not None and all(isinstance(o, dict) for o in objs):
        if "summary" in objs[-1]:
            segments, summary = read_confidence_file(path)
            return ["format: confidence file", f"segments: {len(segments)}",
                    f"summary: {json.dumps(summary, sort_keys=True)}"]
        if "eer" in objs[0]:
            return ["format: metrics report", *(f"{k}: {v}" for k, v in sorted(objs[0].items()))]
        records = [record_from_json(l) for l in lines]
        labels = {r.speaker_label for r in records}
        return ["format: manifest", f"records: {len(records)}",
                f"segments: {sum(len(r.vad_segments) for r in records)}",
                f"frames: {sum(r.frame_count for r in records)}",
                f"labeled: {None not in labels}",
                f"speakers: {len(labels) if None not in labels else 'n/a'}"]
    if all("\t" in l for l in lines):
        try:
            scores = scoring.read_scores(path)
        except (InvalidInputError, ValueError):
            trials = scoring.read_trials(path)
            n_t = sum(t.label == "target" for t in trials)
            return ["format: trial list", f"trials: {len(trials)}", f"targets: {n_t}",
                    f"nontargets: {len(trials) - n_t}"]
        n_t = sum(t.label == "target" for t in scores.trials)
        return ["format: score file", f"trials: {len(scores.trials)}", f"targets: {n_t}",
                f"normalized: {scores.normalized is not None}",
                f"raw mean: {float(scores.raw.mean()):.6g}"]
    known = ", ".join(f"{m} ({d})" for m, d in RECOGNIZED.items())
    raise FormatError(f"{path}: unrecognized format; known magics: {known}; "
                      "text formats: manifest, confidence file, trial list, score file, report")


def cmd_inspect(path):
    path = Path(path)
    data = path.read_bytes()
    magic = data[:4]
    if magic == FEATURE_MAGIC:
        return _inspect_features(path, data)
    if magic == enc.CKPT_MAGIC:
        return _inspect_checkpoint(path, data)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        known = ", ".join(f"{m} ({d})" for m, d in RECOGNIZED.items())
        raise FormatError(f"{path}: unrecognized binary format (magic {magic!r}); "
                          f"known magics: {known}") from None
    return _inspect_text(path, text)


# -- entry point -------------------------------------------------------------

def exit_code_for(exc):
    if isinstance(exc, (ConfigError, InvalidRoleError)):
        return EXIT_CONFIG
    if isinstance(exc, NumericalFailureError):
        return EXIT_NUMERIC
    if isinstance(exc, (CascadeError, OSError)):
        return EXIT_INPUT
    return EXIT_INTERNAL


def _bool(text):
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config leaf (repeatable)")
    common.add_argument("--seed", type=int, help="seed applied to every stage")
    common.add_argument("--workdir", help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--init", choices=sorted(INIT_TO_ROLE), default="teacher")
    model.add_argument("--use-filtered", type=_bool, default=False, metavar="{true,false}")

    p = argparse.ArgumentParser(prog="cascade-spk", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate the synthetic corpus")
    sp = sub.add_parser("pretrain", parents=[common], help="self-distillation pretraining")
    sp.add_argument("--use-filtered", type=_bool, default=False, metavar="{true,false}")
    sp = sub.add_parser("filter", parents=[common], help="confidence-based data filtering")
    sp.add_argument("--quality-report", action="store_true",
                    help="also write an evaluation-only report against ground truth")
    sub.add_parser("finetune", parents=[common, model], help="supervised finetuning")
    sp = sub.add_parser("score", parents=[common, model], help="score the trial list")
    sp.add_argument("--allow-raw-checkpoint", action="store_true",
                    help="score a pretrained (not finetuned) checkpoint")
    sp.add_argument("--checkpoint", help="explicit checkpoint path")
    sp = sub.add_parser("eval", parents=[common], help="compute EER and minDCF")
    sp.add_argument("--tag", help="model tag whose score file to evaluate")
    sp.add_argument("--scores", help="explicit score file")
    sub.add_parser("run-all", parents=[common], help="full cascade and ablation grid")
    sp = sub.add_parser("inspect", help="summarize an artifact")
    sp.add_argument("path")
    return p


def run(args):
    if args.command == "inspect":
        return "\n".join(cmd_inspect(args.path))
    cfg = load_config(args.config, args.overrides, args.seed, args.workdir)
    wd = Workdir(cfg.paths.workdir)
    with workdir_lock(wd.root):
        if args.command == "generate":
            out = cmd_generate(cfg, wd)
        elif args.command == "pretrain":
            out = cmd_pretrain(cfg, wd, args.use_filtered)
        elif args.command == "filter":
            out = cmd_filter(cfg, wd, args.quality_report)
        elif args.command == "finetune":
            out = cmd_finetune(cfg, wd, args.init, args.use_filtered)
        elif args.command == "score":
            out = cmd_score(cfg, wd, args.init, args.use_filtered, args.allow_raw_checkpoint,
                            args.checkpoint)
        elif args.command == "eval":
            if not (args.tag or args.scores):
                raise ConfigError("eval needs --tag or --scores")
            out = cmd_eval(cfg, wd, args.tag, args.scores)
        else:
            out = cmd_run_all(cfg, wd)
    return json.dumps(out, indent=2, sort_keys=True)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        print(run(args))
    except Exception as exc:  # noqa: BLE001 - every failure becomes an exit code
        code = exit_code_for(exc)
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code,
               "command": args.command}
        if code == EXIT_INTERNAL:
            log.exception("internal error")
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
