import argparse
import io
import logging
import sys
from dataclasses import replace
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import yaml

import maskfed.utils.cifar_downloader as cifar
from maskfed.analysis import (
    PMF_HEADER,
    PMF_NOTE,
    SUMMARY_HEADER,
    empirical_update_counts_from_run,
    layout_update_count_pmf,
    pmf_rows,
    policy_update_count_pmf,
    simulate_update_counts,
    summary_row,
)
from maskfed.attack import (
    ATTACK_HEADER,
    ReconstructionMode,
    attack_single_image,
)
from maskfed.federation import METRICS_HEADER, run_federation
from maskfed.models.masks import MaskKind, MaskPolicy
from maskfed.models.vit import (
    count_params,
    grad_check_report,
    init_params,
    loss_and_grad,
    param_shapes,
    save_params,
)
from maskfed.numerics import RandomStream
from maskfed.utils.datasets import (
    LabeledImage,
    load_cifar10_binary,
    resize_dataset,
    synth_dataset,
)
from maskfed.utils.errors import (
    ConfigError,
    ContractViolation,
    DataFormatError,
    TrainingDiverged,
)
from maskfed.utils.utils import (
    ExperimentConfig,
    atomic_write,
    write_csv,
    write_ppm,
    write_raw_image,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
MAX_GRADCHECK_PARAMS = 100_000
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_BATCH = 2
SABOTAGE_OFFSET = 0.1


def policy_slug(policy: MaskPolicy) -> str:
    if policy.is_random:
        return f"{policy.kind.value}_R{policy.zero_prob:g}"
    return policy.kind.value


def load_datasets(
    config: ExperimentConfig,
) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """Training and test sets as the dataset section describes them."""
    ds, model = config.dataset, config.model
    if ds.kind == "synth":
        total = ds.per_class + ds.test_per_class
        items = synth_dataset(
            ds.classes,
            total,
            model.image_h,
            model.image_w,
            model.channels,
            config.seed,
            ds.noise,
        )
        train = [x for i, x in enumerate(items) if i % total < ds.per_class]
        test = [x for i, x in enumerate(items) if i % total >= ds.per_class]
    else:
        assert ds.path is not None
        train = load_cifar10_binary(Path(ds.path), "train")
        test = load_cifar10_binary(Path(ds.path), "test")
    train = train[: ds.train_size] if ds.train_size else train
    test = test[: ds.test_size] if ds.test_size else test
    if ds.resize is not None:
        side = ds.resize
        train = resize_dataset(train, side, side, model.channels)
        test = resize_dataset(test, side, side, model.channels)
    logger.info(f"Dataset {ds.kind}: {len(train)} train, {len(test)} test")
    return train, test


def cmd_train(config: ExperimentConfig, args: argparse.Namespace) -> int:
    policies = list(config.policies)
    labels = [p.label for p in policies]
    if len(policies) > 1 and MaskKind.NONE.value not in labels:
        policies.insert(0, MaskPolicy.no_mask())
    out = Path(config.output_dir, "train")
    train, test = load_datasets(config)
    initial = init_params(config.model, config.seed)
    shapes = param_shapes(config.model)
    fed = config.federation
    final: dict[str, float] = {}
    for policy in policies:
        slug = policy_slug(policy)
        server, rows = run_federation(
            replace(fed, mask_policy=policy), train, test, initial
        )
        write_csv(out / f"metrics_{slug}.csv", METRICS_HEADER, rows, config)
        buffer = io.BytesIO()
        save_params(server.params, buffer)
        atomic_write(out / f"params_{slug}.npz", buffer.getvalue())
        if server.history:
            final[policy.label] = server.history[-1].test_accuracy
        if server.telemetry is not None:
            counts = empirical_update_counts_from_run(server.telemetry)
            analytic = layout_update_count_pmf(
                policy, shapes, fed.epochs, fed.num_clients
            )
            empirical = counts.as_pmf(fed.num_clients, policy.zero_prob)
            write_csv(
                out / f"update_counts_{slug}.csv",
                PMF_HEADER,
                pmf_rows(policy, analytic, empirical),
                config,
                notes=[PMF_NOTE],
            )
            write_csv(
                out / f"update_steps_{slug}.csv",
                ["k", "empirical_p"],
                [[k, float(p)] for k, p in enumerate(counts.step_frequencies)],
                config,
            )
    for label, accuracy in final.items():
        logger.info(f"Final test accuracy {label}: {accuracy:.4f}")
    return EXIT_OK


def cmd_attack(config: ExperimentConfig, args: argparse.Namespace) -> int:
    options = config.attack
    model = config.attack_model
    if model.blocks < 1:
        raise ConfigError("attack.model.blocks: the attack needs a block")
    if model.embed_dim < max(model.tokens, model.patch_dim):
        logger.warning(
            f"Attack model has D={model.embed_dim} < max(S+1, P*P*C) = "
            f"{max(model.tokens, model.patch_dim)}, z0 and the patches "
            "cannot be recovered uniquely"
        )
    mode = ReconstructionMode(options.mode)
    policies = options.mask_policies
    out = Path(config.output_dir, "attack")
    train, test = load_datasets(config)
    params = init_params(model, config.seed)
    if options.warmup_epochs:
        warmup = replace(
            config.federation,
            model=model,
            mask_policy=MaskPolicy.no_mask(),
            epochs=options.warmup_epochs,
            telemetry=False,
        )
        server, _ = run_federation(warmup, train, test, params)
        params = server.params
        logger.info(f"Attacking after {options.warmup_epochs} warm-up epochs")

    rows: list[list[object]] = []
    psnrs: dict[str, list[float]] = {p.label: [] for p in policies}
    for seed in options.seeds:
        stream = RandomStream(seed).derive("attack-image")
        item = train[int(stream.permutation(len(train))[0])]
        stem = out / "images" / f"seed{seed}"
        write_ppm(Path(f"{stem}_ground_truth.ppm"), item.image, model.channels)
        write_raw_image(
            Path(f"{stem}_ground_truth.mfimg"), item.image, model.channels
        )
        for policy in policies:
            result = attack_single_image(
                params, item, policy, seed, model, mode
            )
            name = f"{stem}_{policy_slug(policy)}"
            write_ppm(Path(f"{name}.ppm"), result.image_hat, model.channels)
            write_raw_image(
                Path(f"{name}.mfimg"), result.image_hat, model.channels
            )
            rows.append(
                [
                    seed,
                    policy.kind.value,
                    policy.zero_prob,
                    result.residual_norm,
                    result.mse,
                    result.psnr,
                    int(result.degenerate),
                ]
            )
            psnrs[policy.label].append(result.psnr)
            logger.info(
                f"seed {seed} {policy.label}: psnr {result.psnr:.2f} dB"
                + (" (degenerate)" if result.degenerate else "")
            )
    write_csv(out / "report.csv", ATTACK_HEADER, rows, config)
    for label, values in psnrs.items():
        logger.info(f"Median PSNR {label}: {float(np.median(values)):.2f} dB")
    return EXIT_OK


def cmd_analyze(config: ExperimentConfig, args: argparse.Namespace) -> int:
    options = config.analysis
    m, n = options.epochs, options.clients
    out = Path(config.output_dir, "analysis")
    summary = []
    for zero_prob in options.zero_probs:
        for policy in (
            MaskPolicy.per_epoch(zero_prob),
            MaskPolicy.locked(zero_prob),
        ):
            analytic = policy_update_count_pmf(policy, m, n)
            simulated = simulate_update_counts(
                policy, m, n, options.trials, config.seed, config.threads
            )
            write_csv(
                out / f"pmf_{policy_slug(policy)}.csv",
                PMF_HEADER,
                pmf_rows(policy, analytic, simulated.parameters),
                config,
                notes=[PMF_NOTE],
            )
            row = summary_row(
                policy, analytic, simulated.parameters, options.trials
            )
            logger.info(f"{policy.label}: total variation {row[5]:.5f}")
            summary.append(row)
    write_csv(out / "summary.csv", SUMMARY_HEADER, summary, config)

    shapes = param_shapes(config.model)
    for policy in config.policies:
        layout = layout_update_count_pmf(policy, shapes, m, n)
        write_csv(
            out / f"layout_{policy_slug(policy)}.csv",
            ["f", "p", "policy", "R", "m", "n"],
            [
                [f, float(p), policy.kind.value, policy.zero_prob, m, n]
                for f, p in enumerate(layout.probabilities)
            ],
            config,
        )
    return EXIT_OK


def gradcheck_batch(
    config: ExperimentConfig, size: int = GRADCHECK_BATCH
) -> list[LabeledImage]:
    model = config.model
    stream = RandomStream(config.seed).derive("gradcheck")
    shape = (model.image_h, model.image_w * model.channels)
    return [
        LabeledImage(
            stream.derive("image", i).random(shape),
            int(stream.derive("label", i).permutation(model.classes)[0]),
        )
        for i in range(size)
    ]


def cmd_gradcheck(config: ExperimentConfig, args: argparse.Namespace) -> int:
    model = config.model
    total = count_params(model)
    if total > MAX_GRADCHECK_PARAMS:
        raise ConfigError(
            f"model: {total} parameters, gradcheck is limited to "
            f"{MAX_GRADCHECK_PARAMS}"
        )
    params = init_params(model, config.seed)
    batch = gradcheck_batch(config)
    _, analytic = loss_and_grad(batch, params, model)
    sabotage = getattr(args, "sabotage", None)
    if sabotage is not None:
        if sabotage not in analytic:
            raise ConfigError(f"--sabotage: no parameter named '{sabotage}'")
        analytic[sabotage] = analytic[sabotage] + SABOTAGE_OFFSET
    report = grad_check_report(params, batch, model, analytic=analytic)
    worst = max(report, key=lambda name: report[name])
    print(f"max relative error: {report[worst]:.3e} ({worst})")
    if report[worst] < GRADCHECK_TOLERANCE:
        return EXIT_OK
    logger.error(
        f"Gradient check failed for {worst}: relative error "
        f"{report[worst]:.3e} >= {GRADCHECK_TOLERANCE}"
    )
    return EXIT_FAILED


def cmd_download(config: ExperimentConfig, args: argparse.Namespace) -> int:
    cifar.main(config)
    return EXIT_OK


COMMANDS: dict[str, Callable[[ExperimentConfig, argparse.Namespace], int]] = {
    "train": cmd_train,
    "attack": cmd_attack,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "download": cmd_download,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        help="config file path (default: ./config.yaml)",
        default="config.yaml",
    )
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--out", help="output directory")
    common.add_argument(
        "--policy",
        help="none, fixed-position, per-epoch[:R] or locked[:R]",
    )
    common.add_argument(
        "--zero-prob", type=float, dest="zero_prob", help="mask R"
    )
    common.add_argument("--epochs", type=int, help="training epochs (m)")
    common.add_argument("--clients", type=int, help="number of clients (n)")

    parser = argparse.ArgumentParser(
        prog="maskfed",
        description=(
            "Federated learning simulator for Vision Transformers with "
            "random gradient masking against gradient leakage."
        ),
    )
    subparsers = parser.add_subparsers(
        title="Commands", dest="command", required=True
    )
    subparsers.add_parser(
        "train",
        parents=[common],
        help="Train with each mask policy and record accuracy",
        description="Train with each mask policy and record accuracy",
    )
    subparsers.add_parser(
        "attack",
        parents=[common],
        help="Reconstruct training images from captured updates",
        description="Reconstruct training images from captured updates",
    )
    subparsers.add_parser(
        "analyze",
        parents=[common],
        help="Compare analytic and simulated update counts",
        description="Compare analytic and simulated update counts",
    )
    gradcheck = subparsers.add_parser(
        "gradcheck",
        parents=[common],
        help="Check analytic gradients against finite differences",
        description="Check analytic gradients against finite differences",
    )
    gradcheck.add_argument("--sabotage", help=argparse.SUPPRESS)
    subparsers.add_parser(
        "download",
        parents=[common],
        help="Download CIFAR-10 data",
        description="Download CIFAR-10 data",
    )
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    try:
        config = ExperimentConfig.from_file(Path(args.config))
    except yaml.YAMLError as e:
        raise ConfigError(f"{args.config}: {e}")
    return config.with_overrides(
        seed=args.seed,
        output_dir=args.out,
        policy=args.policy,
        zero_prob=args.zero_prob,
        epochs=args.epochs,
        clients=args.clients,
    )


def setup_logging(
    level: Union[int, str] = logging.INFO,
    output_dir: Optional[Path] = None,
) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        handlers.insert(
            0,
            RotatingFileHandler(
                output_dir / "maskfed.log", maxBytes=1024 * 1024 * 10
            ),
        )
    logging.basicConfig(
        level=level,
        format="%(asctime)s:%(levelname)s:%(name)s: %(message)s",
        handlers=handlers,
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
    except ConfigError as e:
        setup_logging()
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except OSError as e:
        setup_logging()
        logger.error(f"Cannot read config: {e}")
        return EXIT_IO
    try:
        setup_logging(config.logging_level, Path(config.output_dir))
        return COMMANDS[args.command](config, args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (OSError, DataFormatError) as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    except (ContractViolation, TrainingDiverged) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
