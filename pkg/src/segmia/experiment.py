"""End-to-end experiment orchestration.

Stages write their artifacts under ``out/{data,models,attacker,verdicts,reports}``
and later stages read them back from disk, so each stage can be re-run in
isolation and re-running is idempotent. All metric numbers are computed from
persisted verdict files by the report stage; wall-clock timings live in a
separate file so repeated runs stay byte-identical.

Randomness derives from the master seed through named substreams: "data",
"split", "victim", "shadow", "attacker", "defense", "selector", "utility".
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import (
    baseline_mean_confidence,
    baseline_mean_loss,
    baseline_pixel_attacker,
    infer_membership,
    load_attacker,
    pixel_attacker_config,
    save_attacker,
    train_patch_attacker,
)
from .config import ExperimentConfig, config_to_dict
from .defense import DefenseConfig, defended_posterior
from .errors import StageError
from .metrics import ScoredExample, auc, max_f, pr_curve, random_guess_f, roc_curve, write_curve_csv
from .representation import one_hot_labels
from .scenes import generate_dataset, load_dataset, save_dataset, split_dataset
from .seeding import derive_seed
from .segmodel import (
    SegModel,
    load_segmodel,
    mean_iou,
    narrow_segmenter_layers,
    predict_posterior,
    rank_by_confidence,
    save_segmodel,
    segmenter_layers,
    train_segmenter,
)

METHODS = ("ours", "mean_conf", "mean_loss", "pixel")

VERDICT_HEADER = ("image", "is_member", "ours", "mean_conf", "mean_loss", "pixel", "patches", "fallback")


@dataclass
class RunLedger:
    config: dict
    artifact_hashes: dict
    verdicts: dict
    metrics: dict
    timings: dict = field(default_factory=dict)


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def effective_defenses(config: ExperimentConfig):
    """The undefended row always comes first; configured sweep entries follow."""
    out = [("none", DefenseConfig(kind="none"))]
    for d in config.defenses:
        if d.kind != "none":
            out.append((d.tag, d))
    return out


def _needs_defended_attacker(setting: str, defense: DefenseConfig) -> bool:
    """Is the attacker trained on defended shadow outputs for this defense?"""
    if defense.kind == "none":
        return False
    if setting == "dependent":
        return True
    # the argmax transform is obvious to a black-box client, so even an
    # independent attacker mirrors it; other defenses stay victim-only
    return defense.kind == "argmax"


def attacker_tag(config: ExperimentConfig, defense: DefenseConfig) -> str:
    return defense.tag if _needs_defended_attacker(config.setting, defense) else "none"


def victim_dir(out: Path, defense: DefenseConfig) -> Path:
    if defense.kind == "dpsgd":
        return out / "models" / f"victim_{defense.tag}"
    return out / "models" / "victim"


def _shadow_dir(out: Path, defense: DefenseConfig) -> Path:
    if defense.kind == "dpsgd":
        return out / "models" / f"shadow_{defense.tag}"
    return out / "models" / "shadow"


def stage_gen_data(config: ExperimentConfig, out: Path) -> None:
    s = config.split
    if config.setting == "dependent":
        pool = generate_dataset(config.scene, s.total, derive_seed(config.seed, "data", "victim"))
        split = split_dataset(
            s.total,
            (s.victim_in, s.victim_out, s.shadow_in, s.shadow_out),
            derive_seed(config.seed, "split"),
        )
        record = {"shadow_pool": "victim"}
    else:
        pool = generate_dataset(
            config.scene, s.victim_in + s.victim_out, derive_seed(config.seed, "data", "victim")
        )
        shadow_pool = generate_dataset(
            config.resolved_shadow_scene,
            s.shadow_in + s.shadow_out,
            derive_seed(config.seed, "data", "shadow"),
        )
        victim_split = split_dataset(
            s.victim_in + s.victim_out,
            (s.victim_in, s.victim_out, 0, 0),
            derive_seed(config.seed, "split"),
        )
        shadow_split = split_dataset(
            s.shadow_in + s.shadow_out,
            (0, 0, s.shadow_in, s.shadow_out),
            derive_seed(config.seed, "split", "shadow"),
        )
        split = dataclasses.replace(
            victim_split, shadow_in=shadow_split.shadow_in, shadow_out=shadow_split.shadow_out
        )
        record = {"shadow_pool": "separate"}
        save_dataset(out / "data" / "shadow_pool", shadow_pool)
    save_dataset(out / "data" / "victim_pool", pool)
    record.update(
        victim_in=list(split.victim_in),
        victim_out=list(split.victim_out),
        shadow_in=list(split.shadow_in),
        shadow_out=list(split.shadow_out),
    )
    _write_json(out / "data" / "split.json", record)


def _load_split(out: Path) -> dict:
    return json.loads((out / "data" / "split.json").read_text())


def _load_pools(out: Path, split: dict):
    victim_pool = load_dataset(out / "data" / "victim_pool")
    if split["shadow_pool"] == "separate":
        shadow_pool = load_dataset(out / "data" / "shadow_pool")
    else:
        shadow_pool = victim_pool
    return victim_pool, shadow_pool


def _train_victim_model(config: ExperimentConfig, out: Path, train_config) -> SegModel:
    split = _load_split(out)
    pool = load_dataset(out / "data" / "victim_pool")
    scenes = [pool[i] for i in split["victim_in"]]
    layers = segmenter_layers(config.scene.num_classes, train_config.dropout_ratio)
    return train_segmenter(
        scenes, config.scene.num_classes, train_config, derive_seed(config.seed, "victim"), layers
    )


def stage_train_victim(config: ExperimentConfig, out: Path) -> None:
    model = _train_victim_model(config, out, config.victim)
    save_segmodel(out / "models" / "victim", model)


def _shadow_membership(config: ExperimentConfig, out: Path):
    """Scene lists the shadow model treats as members / non-members."""
    split = _load_split(out)
    _, shadow_pool = _load_pools(out, split)
    if config.setting == "dependent":
        ranked = json.loads((out / "models" / "shadow_split.json").read_text())
        in_ids, out_ids = ranked["shadow_in"], ranked["shadow_out"]
    else:
        in_ids, out_ids = split["shadow_in"], split["shadow_out"]
    return [shadow_pool[i] for i in in_ids], [shadow_pool[i] for i in out_ids]


def _train_shadow_model(config: ExperimentConfig, out: Path, train_config) -> SegModel:
    num_classes = config.scene.num_classes
    if config.setting == "dependent":
        layers = segmenter_layers(num_classes, train_config.dropout_ratio)
    else:
        layers = narrow_segmenter_layers(num_classes, train_config.dropout_ratio)
    members, _ = _shadow_membership(config, out)
    return train_segmenter(
        members, num_classes, train_config, derive_seed(config.seed, "shadow"), layers
    )


def stage_train_shadow(config: ExperimentConfig, out: Path) -> None:
    if config.setting == "dependent":
        # the attacker queries the victim and keeps its most confidently
        # handled scenes as the shadow training set
        split = _load_split(out)
        pool = load_dataset(out / "data" / "victim_pool")
        victim = load_segmodel(out / "models" / "victim")
        pool_ids = list(split["shadow_in"]) + list(split["shadow_out"])
        ranked = rank_by_confidence(victim, [pool[i] for i in pool_ids])
        ordered = [pool_ids[r] for r in ranked]
        top = config.split.shadow_in
        _write_json(
            out / "models" / "shadow_split.json",
            {"shadow_in": ordered[:top], "shadow_out": ordered[top:]},
        )
    model = _train_shadow_model(config, out, config.resolved_shadow)
    save_segmodel(out / "models" / "shadow", model)


def _shadow_training_maps(config: ExperimentConfig, out: Path, tag: str, defense: DefenseConfig):
    """(posterior, one-hot) pairs the attacker trains on, defended as the run demands."""
    shadow = load_segmodel(_shadow_dir(out, defense))
    members, others = _shadow_membership(config, out)
    num_classes = config.scene.num_classes

    def maps(scenes, group):
        result = []
        for k, scene in enumerate(scenes):
            seed = derive_seed(config.seed, "defense", tag, "shadow", group, k)
            posterior = defended_posterior(shadow, scene.image, defense, seed)
            result.append((posterior, one_hot_labels(scene.labels, num_classes)))
        return result

    return maps(members, "in"), maps(others, "out")


def _train_attackers(config: ExperimentConfig, out: Path, tag: str, defense: DefenseConfig) -> None:
    member_maps, other_maps = _shadow_training_maps(config, out, tag, defense)
    num_classes = config.scene.num_classes
    patch = train_patch_attacker(
        member_maps, other_maps, num_classes, config.attacker, derive_seed(config.seed, "attacker", tag)
    )
    save_attacker(out / "attacker" / tag / "patch", patch)
    pixel = train_patch_attacker(
        member_maps,
        other_maps,
        num_classes,
        pixel_attacker_config(),
        derive_seed(config.seed, "attacker", tag, "pixel"),
    )
    save_attacker(out / "attacker" / tag / "pixel", pixel)


def stage_train_attacker(config: ExperimentConfig, out: Path) -> None:
    _train_attackers(config, out, "none", DefenseConfig(kind="none"))


def _probes(split: dict):
    return [(i, True) for i in split["victim_in"]] + [(i, False) for i in split["victim_out"]]


def _evaluate_defense(config: ExperimentConfig, out: Path, tag: str, defense: DefenseConfig) -> None:
    split = _load_split(out)
    pool = load_dataset(out / "data" / "victim_pool")
    victim = load_segmodel(victim_dir(out, defense))
    atag = attacker_tag(config, defense)
    patch_attacker = load_attacker(out / "attacker" / atag / "patch")
    pixel_attacker = load_attacker(out / "attacker" / atag / "pixel")
    num_classes = config.scene.num_classes

    rows = []
    for i, (image_id, is_member) in enumerate(_probes(split)):
        scene = pool[image_id]
        posterior = defended_posterior(
            victim, scene.image, defense, derive_seed(config.seed, "defense", tag, i)
        )
        target = one_hot_labels(scene.labels, num_classes)
        selector = config.selector.build(derive_seed(config.seed, "selector", tag, i))
        verdict = infer_membership(patch_attacker, posterior, target, selector)
        scores = {
            "ours": verdict.score,
            "mean_conf": baseline_mean_confidence(posterior),
            "mean_loss": baseline_mean_loss(posterior, target),
            "pixel": baseline_pixel_attacker(pixel_attacker, posterior, target),
        }
        rows.append(
            [image_id, int(is_member)]
            + [repr(scores[m]) for m in METHODS]
            + [len(verdict.rects), int(verdict.fallback)]
        )
    _write_rows(out / "verdicts" / f"{tag}.csv", VERDICT_HEADER, rows)


def stage_attack(config: ExperimentConfig, out: Path) -> None:
    _evaluate_defense(config, out, "none", DefenseConfig(kind="none"))


def stage_defend_sweep(config: ExperimentConfig, out: Path) -> None:
    """Train defense-variant models/attackers where required, then evaluate.

    The undefended row is the attack stage's job; this stage covers the rest.
    DPSGD retrains the victim (both settings) and, in the dependent setting,
    the shadow model as well; other defenses transform posteriors at query
    time. The attacker is retrained on defended shadow outputs whenever the
    setting mirrors the defense (dependent always, independent for argmax).
    """
    for tag, defense in effective_defenses(config):
        if defense.kind == "none":
            continue
        if defense.kind == "dpsgd":
            victim_config = dataclasses.replace(
                config.victim, optimizer="dpsgd", noise_variance=defense.noise_variance
            )
            save_segmodel(victim_dir(out, defense), _train_victim_model(config, out, victim_config))
            if config.setting == "dependent":
                shadow_config = dataclasses.replace(
                    config.resolved_shadow, optimizer="dpsgd", noise_variance=defense.noise_variance
                )
                save_segmodel(_shadow_dir(out, defense), _train_shadow_model(config, out, shadow_config))
        if attacker_tag(config, defense) == tag:
            _train_attackers(config, out, tag, defense)
        _evaluate_defense(config, out, tag, defense)


def _read_verdicts(out: Path, tag: str):
    path = out / "verdicts" / f"{tag}.csv"
    if not path.exists():
        raise StageError(f"missing verdicts for {tag!r}; run the attack stages first", stage="report")
    rows = []
    with open(path, newline="") as fh:
        for record in csv.DictReader(fh):
            rows.append(
                {
                    "image": int(record["image"]),
                    "is_member": bool(int(record["is_member"])),
                    "scores": {m: float(record[m]) for m in METHODS},
                    "patches": int(record["patches"]),
                    "fallback": bool(int(record["fallback"])),
                }
            )
    return rows


def _utility_miou(config: ExperimentConfig, out: Path, tag: str, defense: DefenseConfig) -> float:
    split = _load_split(out)
    pool = load_dataset(out / "data" / "victim_pool")
    victim = load_segmodel(victim_dir(out, defense))
    preds, truths = [], []
    for i, image_id in enumerate(split["victim_out"]):
        scene = pool[image_id]
        posterior = defended_posterior(
            victim, scene.image, defense, derive_seed(config.seed, "utility", tag, i)
        )
        preds.append(np.argmax(posterior, axis=-1))
        truths.append(scene.labels)
    return mean_iou(np.stack(preds), np.stack(truths), config.scene.num_classes)


def _plain_miou(model: SegModel, scenes, num_classes: int) -> float:
    preds = [np.argmax(predict_posterior(model, s.image), axis=-1) for s in scenes]
    return mean_iou(np.stack(preds), np.stack([s.labels for s in scenes]), num_classes)


def _hash_artifacts(out: Path) -> dict:
    hashes = {}
    for top in ("data", "models", "attacker", "verdicts"):
        base = out / top
        if not base.is_dir():
            continue
        for path in sorted(base.rglob("*")):
            if path.is_file():
                digest = hashlib.sha256(path.read_bytes()).hexdigest()
                hashes[path.relative_to(out).as_posix()] = digest
    return hashes


def stage_report(config: ExperimentConfig, out: Path) -> RunLedger:
    split = _load_split(out)
    pool = load_dataset(out / "data" / "victim_pool")
    victim = load_segmodel(out / "models" / "victim")
    num_classes = config.scene.num_classes

    reports = out / "reports"
    curves_dir = reports / "curves"
    verdicts = {}
    metrics = {
        "victim": {
            "train_miou": _plain_miou(victim, [pool[i] for i in split["victim_in"]], num_classes),
            "holdout_miou": _plain_miou(victim, [pool[i] for i in split["victim_out"]], num_classes),
        },
        "defenses": {},
    }

    utility_rows = []
    method_rows = []
    for tag, defense in effective_defenses(config):
        rows = _read_verdicts(out, tag)
        verdicts[tag] = rows
        per_method = {}
        for method in METHODS:
            examples = [ScoredExample(r["scores"][method], r["is_member"]) for r in rows]
            roc = roc_curve(examples)
            pr = pr_curve(examples)
            per_method[method] = {"auc": auc(roc), "max_f": max_f(pr)}
            write_curve_csv(curves_dir / f"{tag}_{method}_roc.csv", roc)
            write_curve_csv(curves_dir / f"{tag}_{method}_pr.csv", pr)
        miou = _utility_miou(config, out, tag, defense)
        metrics["defenses"][tag] = {
            "kind": defense.kind,
            "param": defense.param,
            "miou": miou,
            "methods": per_method,
        }
        param_text = "" if defense.param is None else f"{defense.param:g}"
        utility_rows.append(
            [
                defense.kind,
                param_text,
                f"{per_method['ours']['auc']:.9g}",
                f"{per_method['ours']['max_f']:.9g}",
                f"{miou:.9g}",
            ]
        )
        for method in METHODS:
            method_rows.append(
                [
                    defense.kind,
                    param_text,
                    method,
                    f"{per_method[method]['auc']:.9g}",
                    f"{per_method[method]['max_f']:.9g}",
                ]
            )

    _write_rows(reports / "privacy_utility.csv", ("defense", "param", "auc", "max_f", "miou"), utility_rows)
    _write_rows(reports / "methods.csv", ("defense", "param", "method", "auc", "max_f"), method_rows)

    num_members = len(split["victim_in"])
    num_others = len(split["victim_out"])
    lines = [
        f"victim train mIoU    {metrics['victim']['train_miou']:.4f}",
        f"victim held-out mIoU {metrics['victim']['holdout_miou']:.4f}",
        f"random-guess max-F   {random_guess_f(num_members, num_others):.4f}"
        f"  ({num_members} members / {num_others} others)",
        "",
        f"{'defense':<14}{'param':>8}{'auc':>10}{'max_f':>10}{'miou':>10}",
    ]
    for row in utility_rows:
        lines.append(f"{row[0]:<14}{row[1]:>8}{float(row[2]):>10.4f}{float(row[3]):>10.4f}{float(row[4]):>10.4f}")
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "summary.txt").write_text("\n".join(lines) + "\n")

    ledger = RunLedger(
        config=config_to_dict(config),
        artifact_hashes=_hash_artifacts(out),
        verdicts=verdicts,
        metrics=metrics,
    )
    _write_json(
        reports / "ledger.json",
        {
            "config": ledger.config,
            "artifact_hashes": ledger.artifact_hashes,
            "verdicts": ledger.verdicts,
            "metrics": ledger.metrics,
        },
    )
    return ledger


STAGES = (
    ("gen-data", stage_gen_data),
    ("train-victim", stage_train_victim),
    ("train-shadow", stage_train_shadow),
    ("train-attacker", stage_train_attacker),
    ("attack", stage_attack),
    ("defend-sweep", stage_defend_sweep),
    ("report", stage_report),
)


def run_experiment(config: ExperimentConfig, out=None, progress=None) -> RunLedger:
    """Run every stage in order; any failure aborts with the stage name."""
    out = Path(config.out_dir if out is None else out)
    timings = {}
    ledger = None
    for name, stage in STAGES:
        if progress is not None:
            progress(name)
        started = time.perf_counter()
        try:
            result = stage(config, out)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(f"stage {name} failed: {exc}", stage=name) from exc
        timings[name] = time.perf_counter() - started
        if name == "report":
            ledger = result
    ledger.timings = timings
    _write_json(out / "reports" / "timings.json", timings)
    return ledger
