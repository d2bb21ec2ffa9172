"""Command-line entry point.

One executable with subcommands covering the whole pipeline:

    latentadv gen-data CONFIG      synthesize the corpus + manifest
    latentadv train CONFIG         train codec, noise net, detectors; gate
    latentadv attack CONFIG        run the latent attack over the fake split
    latentadv eval CONFIG          score, report CSV/JSON and figures
    latentadv selftest             fast exact-identity and gradient suites

Exit codes: 0 ok, 1 config/validation error, 2 admission or self-test
failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .attack import (
    AdmissionError,
    AttackConfig,
    AttackModels,
    gradient_step,
    project,
    run_attack,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, config_hash, load_config
from .data import gen_dataset, read_manifest, write_manifest
from .diffusion import cfg_predict, ddim_invert_step, ddim_step, denoise_chain, make_schedule
from .metrics import EvalRecord, competition_score, ssim
from .models import ClassifierNet, Codec, EmbeddingTable, ScoreNet
from .report import write_report
from .training import TrainConfig, TrainingDiverged, run_admission, train_classifier, train_codec, train_score_net

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ADMISSION = 2
EXIT_IO = 3


def _model_seed(base: int, tag: int) -> int:
    return int(np.random.SeedSequence(int(base), spawn_key=(int(tag),)).generate_state(1)[0])


def _build_models(cfg: dict):
    m = cfg["models"]
    s = cfg["schedule"]
    schedule = make_schedule(s["T_train"], s["beta_start"], s["beta_end"], s["ddim_steps"])
    codec = Codec(m["codec"], m["latent_dim"], seed=_model_seed(m["seed"], 0))
    score = ScoreNet(codec.latent_dim, seed=_model_seed(m["seed"], 1))
    table = EmbeddingTable(seed=_model_seed(m["seed"], 2))
    white_box = [
        ClassifierNet(width, seed=_model_seed(m["seed"], 10 + i))
        for i, width in enumerate(m["classifier_widths"])
    ]
    transfer = ClassifierNet(m["transfer_width"], seed=_model_seed(m["seed"], 99))
    return schedule, codec, score, table, white_box, transfer


def _workdir(cfg: dict) -> str:
    return cfg["paths"]["workdir"]


def _corpus_paths(workdir: str):
    return os.path.join(workdir, "corpus_manifest.jsonl"), os.path.join(workdir, "corpus.ckpt")


def _checkpoint_dir(workdir: str) -> str:
    return os.path.join(workdir, "checkpoints")


def _load_corpus(cfg: dict):
    """Rebuild the sample list from the manifest + image container."""
    from .data import SyntheticSample

    manifest_path, corpus_path = _corpus_paths(_workdir(cfg))
    if not (os.path.exists(manifest_path) and os.path.exists(corpus_path)):
        raise FileNotFoundError(f"corpus not found under {_workdir(cfg)!r}; run gen-data first")
    records = read_manifest(manifest_path)
    blobs = load_checkpoint(corpus_path)
    images = blobs["images"]
    if images.shape[0] != len(records):
        raise CheckpointError("corpus image count does not match the manifest")
    samples = []
    for rec, image in zip(records, images):
        image = np.ascontiguousarray(image)
        image.flags.writeable = False
        samples.append(
            SyntheticSample(
                image=image, label=int(rec["label"]), seed=int(rec["seed"]), split=rec["split"]
            )
        )
    return samples


def cmd_gen_data(cfg: dict) -> int:
    workdir = _workdir(cfg)
    os.makedirs(workdir, exist_ok=True)
    samples = gen_dataset(cfg["data"]["n_per_class"], cfg["data"]["seed"])
    manifest_path, corpus_path = _corpus_paths(workdir)
    write_manifest(manifest_path, samples)
    save_checkpoint(
        corpus_path,
        {
            "images": np.stack([s.image for s in samples]),
            "labels": np.array([float(s.label) for s in samples]),
        },
    )
    meta = {"config": cfg, "config_hash": config_hash(cfg), "n_samples": len(samples)}
    with open(os.path.join(workdir, "corpus_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"gen-data: wrote {len(samples)} samples to {workdir}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    samples = _load_corpus(cfg)
    schedule, codec, score, table, white_box, transfer = _build_models(cfg)
    t = cfg["models"]["train"]
    base = TrainConfig(
        lr=t["lr"],
        batch_size=t["batch_size"],
        momentum=t["momentum"],
        optimizer=t["optimizer"],
        epochs=0,
        seed=0,
    )

    def tcfg(epochs: int, tag: int) -> TrainConfig:
        return TrainConfig(
            lr=base.lr,
            batch_size=base.batch_size,
            momentum=base.momentum,
            optimizer=base.optimizer,
            epochs=epochs,
            seed=_model_seed(cfg["models"]["seed"], 1000 + tag),
        )

    train_codec(codec, samples, tcfg(t["codec_epochs"], 0))
    train_score_net(score, codec, samples, schedule, table, tcfg(t["score_epochs"], 1))
    for i, clf in enumerate(white_box):
        train_classifier(clf, samples, tcfg(t["classifier_epochs"], 10 + i))
    train_classifier(transfer, samples, tcfg(t["classifier_epochs"], 99))

    ckpt_dir = _checkpoint_dir(_workdir(cfg))
    os.makedirs(ckpt_dir, exist_ok=True)
    save_checkpoint(os.path.join(ckpt_dir, "codec.ckpt"), codec.params)
    save_checkpoint(
        os.path.join(ckpt_dir, "score_net.ckpt"), {**score.params, "emb_rows": table.params["rows"]}
    )
    for i, clf in enumerate(white_box):
        save_checkpoint(os.path.join(ckpt_dir, f"classifier_{i}.ckpt"), clf.params)
    save_checkpoint(os.path.join(ckpt_dir, "classifier_transfer.ckpt"), transfer.params)

    admission = run_admission(codec, score, table, schedule, white_box, transfer, samples)
    admission["config"] = cfg
    admission["config_hash"] = config_hash(cfg)
    with open(os.path.join(_workdir(cfg), "admission.json"), "w", encoding="utf-8") as fh:
        json.dump(admission, fh, indent=2, sort_keys=True)
        fh.write("\n")
    accs = ", ".join(f"{a:.3f}" for a in admission["classifier_accuracy"])
    print(
        f"train: accuracies [{accs}] transfer {admission['transfer_accuracy']:.3f} "
        f"recon_linf {admission['recon_image_linf']:.4f} passed={admission['passed']}"
    )
    if not admission["passed"]:
        print("train: admission FAILED", file=sys.stderr)
        return EXIT_ADMISSION
    return EXIT_OK


def _load_trained(cfg: dict):
    schedule, codec, score, table, white_box, transfer = _build_models(cfg)
    ckpt_dir = _checkpoint_dir(_workdir(cfg))
    if not os.path.isdir(ckpt_dir):
        raise FileNotFoundError(f"checkpoints not found under {_workdir(cfg)!r}; run train first")
    if codec.variant != "identity":
        codec.set_params(load_checkpoint(os.path.join(ckpt_dir, "codec.ckpt")))
    blob = load_checkpoint(os.path.join(ckpt_dir, "score_net.ckpt"))
    table.set_params({"rows": blob.pop("emb_rows")})
    score.set_params(blob)
    for i, clf in enumerate(white_box):
        clf.set_params(load_checkpoint(os.path.join(ckpt_dir, f"classifier_{i}.ckpt")))
    transfer.set_params(load_checkpoint(os.path.join(ckpt_dir, "classifier_transfer.ckpt")))
    return schedule, codec, score, table, white_box, transfer


def _load_admission(cfg: dict) -> dict:
    path = os.path.join(_workdir(cfg), "admission.json")
    if not os.path.exists(path):
        raise FileNotFoundError("admission record not found; run train first")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _attack_config(cfg: dict, args) -> AttackConfig:
    a = dict(cfg["attack"])
    if args is not None:
        if args.grad_method:
            a["grad_method"] = args.grad_method
        if args.no_transforms:
            a["transforms"] = []
        if args.timestep is not None:
            a["timestep_index"] = args.timestep
    return AttackConfig(
        eps_start=a["eps_start"],
        eps_end=a["eps_end"],
        eps_step=a["eps_step"],
        iters_per_radius=a["iters_per_radius"],
        step_size=a["step_size"],
        grad_method=a["grad_method"],
        momentum=a["momentum"],
        l1_weight=a["l1_weight"],
        transforms=tuple(a["transforms"]),
        timestep_index=a["timestep_index"],
        guidance_w=a["guidance_w"],
        seed=a["seed"],
    )


def cmd_attack(cfg: dict, args=None) -> int:
    samples = _load_corpus(cfg)
    admission = _load_admission(cfg)
    if not admission.get("passed", False):
        print("attack: refusing to run, admission has not passed", file=sys.stderr)
        return EXIT_ADMISSION
    schedule, codec, score, table, white_box, transfer = _load_trained(cfg)
    attack_cfg = _attack_config(cfg, args)
    bundle = AttackModels(
        codec=codec,
        score_net=score,
        table=table,
        schedule=schedule,
        white_box=tuple(white_box),
        white_box_names=tuple(f"classifier_{i}" for i in range(len(white_box))),
        transfer=transfer,
        transfer_name="transfer",
        admission=admission,
    )

    split = cfg["eval"]["split"]
    targets = [(i, s) for i, s in enumerate(samples) if s.split == split and s.label == 1]
    limit = getattr(args, "limit", None) if args is not None else None
    if limit is not None:
        targets = targets[:limit]
    save_deltas = bool(getattr(args, "save_deltas", False)) if args is not None else False

    attack_dir = os.path.join(_workdir(cfg), "attack")
    os.makedirs(attack_dir, exist_ok=True)
    tensors: dict[str, np.ndarray] = {}
    records_path = os.path.join(attack_dir, "records.jsonl")
    with open(records_path, "w", encoding="utf-8") as fh:
        header = {
            "type": "header",
            "config": cfg,
            "config_hash": config_hash(cfg),
            "grad_method": attack_cfg.grad_method,
            "n_targets": len(targets),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for image_id, sample in targets:
            result = run_attack(sample.image, attack_cfg, bundle, image_id=image_id)
            rec = {
                "type": "record",
                "id": result.image_id,
                "success": result.success,
                "ssim": result.ssim,
                "radius": result.radius,
                "iterations": result.iterations,
                "verdicts": result.verdicts,
                "loss_trace": result.loss_trace,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            tensors[f"x_adv/{image_id}"] = result.x_adv
            if save_deltas:
                tensors[f"delta/{image_id}"] = result.delta
    save_checkpoint(os.path.join(attack_dir, "tensors.ckpt"), tensors)
    print(f"attack: wrote {len(targets)} records to {records_path}")
    return EXIT_OK


def _recon_for(codec, score, table, schedule, attack_cfg: AttackConfig, image: np.ndarray):
    from .diffusion import invert_chain

    cond = table.embed(EmbeddingTable.FAKE_STYLE)
    null_cond = table.embed(EmbeddingTable.NULL)
    z0 = codec.encode(image)
    traj = invert_chain(
        score, schedule, z0, attack_cfg.timestep_index, cond, null_cond, attack_cfg.guidance_w
    )
    z_back = denoise_chain(
        score,
        schedule,
        traj[-1],
        attack_cfg.timestep_index,
        cond,
        null_cond,
        attack_cfg.guidance_w,
    )
    return codec.decode(z_back).data


def cmd_eval(cfg: dict) -> int:
    samples = _load_corpus(cfg)
    schedule, codec, score, table, white_box, transfer = _load_trained(cfg)
    attack_dir = os.path.join(_workdir(cfg), "attack")
    records_path = os.path.join(attack_dir, "records.jsonl")
    if not os.path.exists(records_path):
        raise FileNotFoundError("attack records not found; run attack first")
    tensors = load_checkpoint(os.path.join(attack_dir, "tensors.ckpt"))
    attack_cfg = _attack_config(cfg, None)

    names = [f"classifier_{i}" for i in range(len(white_box))] + ["transfer"]
    nets = list(white_box) + [transfer]
    eval_records = []
    panels = []
    with open(records_path, "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("type") != "record":
                continue
            image_id = int(rec["id"])
            original = samples[image_id].image
            x_adv = tensors[f"x_adv/{image_id}"]
            verdicts = {
                name: int(np.argmax(net.logits(x_adv).data)) for name, net in zip(names, nets)
            }
            value = ssim(original, x_adv)
            success = all(verdicts[n] == 0 for n in names[:-1])
            eval_records.append(
                EvalRecord(
                    image_id=image_id,
                    ssim=value,
                    verdicts=verdicts,
                    radius=rec.get("radius"),
                    success=success,
                )
            )
            recon = _recon_for(codec, score, table, schedule, attack_cfg, original)
            panels.append((image_id, original, recon, x_adv))

    breakdown = competition_score(eval_records, names)
    out_dir = os.path.join(_workdir(cfg), "eval")
    paths = write_report(
        eval_records,
        breakdown,
        out_dir,
        classifier_names=names,
        white_box_names=names[:-1],
        transfer_name="transfer",
        config=cfg,
        config_hash=config_hash(cfg),
        panels=panels,
    )
    print(f"eval: score total {breakdown.total:.4f} over {len(eval_records)} images")
    print(f"eval: wrote {paths['csv']} and {paths['json']}")
    return EXIT_OK


# --- selftest ---------------------------------------------------------------


def _selftest_suites():
    rng = np.random.default_rng(20240817)

    def shared_eps_roundtrip():
        schedule = make_schedule()
        z = rng.normal(0.0, 1.0, 12)
        eps = rng.normal(0.0, 1.0, 12)
        worst = 0.0
        for i in range(schedule.ddim_steps):
            a = float(schedule.alpha_bars[schedule.ddim_indices[i]])
            b = float(schedule.alpha_bars[schedule.ddim_indices[i + 1]])
            up = ddim_invert_step(z, eps, a, b)
            down = ddim_step(up, eps, b, a)
            worst = max(worst, float(np.max(np.abs(down.data - z))))
        return worst < 1e-12, f"max roundtrip error {worst:.2e}"

    def cfg_w1_bitwise():
        schedule = make_schedule(10, 1e-3, 2e-2, 2)
        net = ScoreNet(8, seed=5)
        z = rng.normal(0.0, 1.0, 8)
        cond = rng.normal(0.0, 1.0, 16)
        null = rng.normal(0.0, 1.0, 16)
        guided = cfg_predict(net, z, 5, cond, null, w=1.0)
        plain = net.predict(z, 5, cond)
        ok = guided.data.tobytes() == plain.data.tobytes()
        return ok, "w=1 equals conditional branch bitwise"

    def projection_idempotent():
        d = rng.normal(0.0, 1.0, 64)
        once = project(d, 0.3)
        twice = project(once, 0.3)
        return np.array_equal(once, twice), "project is idempotent"

    def ssim_self_identity():
        x = rng.uniform(0.0, 1.0, (3, 16, 16))
        return ssim(x, x) == 1.0, "ssim(x, x) == 1"

    def mifgsm_mu0_is_fgsm():
        d = rng.normal(0.0, 1.0, 32)
        grad = rng.normal(0.0, 1.0, 32)
        a, _ = gradient_step(d, np.zeros(32), grad, 0.01, "mi-fgsm", momentum=0.0)
        b, _ = gradient_step(d, np.zeros(32), grad, 0.01, "fgsm-sign", momentum=0.0)
        return np.array_equal(a, b), "mi-fgsm with mu=0 matches fgsm-sign"

    def tiny_grad_checks():
        worst = 0.0
        program = ad.DiffProgram(lambda x: ad.reduce_sum(ad.multiply(x, x)), 1)
        worst = max(worst, program.grad_check([rng.uniform(0.5, 1.5, 6)]))
        program = ad.DiffProgram(lambda x: ad.reduce_mean(ad.tanh(x)), 1)
        worst = max(worst, program.grad_check([rng.uniform(-1.0, 1.0, 6)]))

        schedule = make_schedule(10, 1e-3, 2e-2, 2)
        net = ScoreNet(8, seed=7)
        cond = rng.normal(0.0, 0.5, 16)

        def chain_norm(z):
            out = denoise_chain(net, schedule, z, 2, ad.constant(np.ascontiguousarray(cond)))
            return ad.reduce_sum(ad.multiply(out, out))

        program = ad.DiffProgram(chain_norm, 1)
        worst = max(worst, program.grad_check([rng.normal(0.0, 1.0, 8)]))
        return worst < 1e-5, f"max grad-check error {worst:.2e}"

    return [
        ("shared-eps roundtrip", shared_eps_roundtrip),
        ("guidance w=1 bitwise", cfg_w1_bitwise),
        ("projection idempotent", projection_idempotent),
        ("ssim self-identity", ssim_self_identity),
        ("mi-fgsm mu=0 vs fgsm-sign", mifgsm_mu0_is_fgsm),
        ("tiny-config grad checks", tiny_grad_checks),
    ]


def cmd_selftest() -> int:
    failures = 0
    for name, suite in _selftest_suites():
        ok, detail = suite()
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name}: {detail}")
        failures += not ok
    if failures:
        print(f"selftest: {failures} suite(s) failed", file=sys.stderr)
        return EXIT_ADMISSION
    print("selftest: all suites passed")
    return EXIT_OK


# --- entry point --------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentadv",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("gen-data", "train", "eval"):
        p = sub.add_parser(name)
        p.add_argument("config", help="path to the JSON run config")

    p = sub.add_parser("attack")
    p.add_argument("config", help="path to the JSON run config")
    p.add_argument("--limit", type=int, default=None, help="attack at most N images")
    p.add_argument(
        "--grad-method",
        choices=("plain-gd", "fgsm-sign", "mi-fgsm"),
        default=None,
        help="override the gradient update rule",
    )
    p.add_argument("--no-transforms", action="store_true", help="disable the transform pool")
    p.add_argument("--timestep", type=int, default=None, help="override the latent step index")
    p.add_argument("--save-deltas", action="store_true", help="store perturbations in tensors.ckpt")

    sub.add_parser("selftest")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "selftest":
            return cmd_selftest()
        cfg = load_config(args.config)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "attack":
            return cmd_attack(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg)
        raise AssertionError(f"unhandled command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AdmissionError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ADMISSION
    except (FileNotFoundError, CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
