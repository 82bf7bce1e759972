"""``rlmtkit`` command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from typing import Any, Sequence

from rlmtkit import datasets
from rlmtkit.chatproto import TemplateKind, render_prompt
from rlmtkit.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from rlmtkit.config import PROMPT_TOKEN_CEILING, Algorithm, Mode, TrainConfig, parse_config_text
from rlmtkit.errors import DataError, InvalidInputError, JudgeError, NumericError
from rlmtkit.policy import PolicyParams, Vocab, init_params, snapshot_reference
from rlmtkit.rewards import (
    BtRewardModel,
    ModelReward,
    RewardSource,
    Task,
    VerifierReward,
    pairwise_accuracy,
    train_reward_model,
)
from rlmtkit.tasks import sort_demos, sort_preferences, sort_tasks, task_vocab
from rlmtkit.trainer import EvalResult, MetricsRow, dpo_round, evaluate, read_metrics, rl_train, sft_train, write_metrics
from rlmtkit import traitlab

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SEED_ENV = "RLMTKIT_SEED"
CHECKPOINT_FILE = "checkpoint.txt"
METRICS_FILE = "metrics.csv"
CONFIG_FILE = "config.txt"
EVAL_FILE = "eval.txt"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config resolution


def _seed_override(args: argparse.Namespace) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None or not env.strip():
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None


def resolve_config(
    args: argparse.Namespace,
    overrides: dict[str, Any],
    base: dict[str, Any] | None = None,
    explicit: set[str] | None = None,
) -> TrainConfig:
    """Defaults < ``base`` (e.g. a checkpoint's config) < config file < flags < seed.

    Keys set by the config file or flags are added to ``explicit`` when given.
    """
    raw: dict[str, Any] = dict(base or {})
    given: dict[str, Any] = {}
    path = args.config
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                given.update(parse_config_text(f.read(), path))
        except OSError as e:
            raise DataError(f"cannot read config: {e.strerror}", path) from None
    given.update({k: v for k, v in overrides.items() if v is not None})
    raw.update(given)
    if explicit is not None:
        explicit.update(given)
    seed = _seed_override(args)
    if seed is not None:
        raw["seed"] = seed
    if args.threads is not None:
        raw["threads"] = args.threads
    return TrainConfig.from_dict(raw)


def _print_config(cfg: TrainConfig) -> int:
    sys.stdout.write(cfg.to_text())
    return EXIT_OK


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = ["--" + n.replace("_", "-") for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")


def _out_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory: {e.strerror}", path) from None
    return path


def _check_vocab(vocab: Vocab, kind: TemplateKind, tasks: Sequence[Task], path: str) -> None:
    for t in tasks:
        for text in (render_prompt(kind, t.prompt), t.gold or ""):
            try:
                vocab.encode(text)
            except InvalidInputError as e:
                raise DataError(f"prompt {t.prompt!r} does not fit the checkpoint vocabulary: {e}", path) from None


def parse_reward(spec: str, cfg_reward_model: str = "") -> RewardSource:
    if spec == "verifier":
        return VerifierReward()
    if spec == "model":
        spec = "rm:" + cfg_reward_model
    if spec.startswith("rm:") and len(spec) > 3:
        return ModelReward(BtRewardModel.load(spec[3:]), name=spec)
    raise UsageError(f"reward must be 'verifier' or 'rm:PATH', got {spec!r}")


def _reward_overrides(spec: str | None) -> dict[str, Any]:
    if spec is None:
        return {}
    if spec == "verifier":
        return {"reward": "verifier"}
    if spec.startswith("rm:") and len(spec) > 3:
        return {"reward": "model", "reward_model": spec[3:]}
    raise UsageError(f"reward must be 'verifier' or 'rm:PATH', got {spec!r}")


def _reward_from_config(cfg: TrainConfig) -> RewardSource:
    if cfg.reward == "verifier":
        return VerifierReward()
    if not cfg.reward_model:
        raise UsageError("reward = model needs a reward_model path")
    return ModelReward(BtRewardModel.load(cfg.reward_model), name="rm:" + cfg.reward_model)


def format_eval(name: str, res: EvalResult) -> str:
    return (
        f"reward={name} mean_reward={res.mean_reward:.6f} win_rate={res.win_rate:.6f} "
        f"ref_mean_reward={res.ref_mean_reward:.6f} mean_thought_tokens={res.mean_thought_tokens:.4f} "
        f"mean_response_tokens={res.mean_response_tokens:.4f} well_formed={res.well_formed_frac:.4f}"
    )


def _write_run(out: str, params: PolicyParams, cfg: TrainConfig, rows: list[MetricsRow], step: int) -> None:
    save_checkpoint(os.path.join(out, CHECKPOINT_FILE), Checkpoint(params, cfg.to_dict(), step, cfg.seed, step))
    write_metrics(os.path.join(out, METRICS_FILE), rows)
    with open(os.path.join(out, CONFIG_FILE), "w", encoding="utf-8", newline="\n") as f:
        f.write(cfg.to_text())


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_data(args: argparse.Namespace) -> int:
    _require(args, "out")
    seed = _seed_override(args) or 0
    out = _out_dir(args.out)
    train = sort_tasks(args.n_train, seed + 1)
    held = sort_tasks(args.n_eval, seed + 2)
    datasets.write_prompts(os.path.join(out, "prompts.tsv"), train)
    datasets.write_prompts(os.path.join(out, "eval_prompts.tsv"), held)
    datasets.write_demos(os.path.join(out, "demos.tsv"), sort_demos(train, seed + 3))
    datasets.write_preferences(
        os.path.join(out, "preferences.tsv"), sort_preferences(sort_tasks(args.n_pairs, seed + 11), seed + 12))
    datasets.write_preferences(
        os.path.join(out, "preferences_heldout.tsv"), sort_preferences(sort_tasks(args.n_eval, seed + 13), seed + 14))
    print(f"wrote datasets to {out}")
    return EXIT_OK


def cmd_train_rm(args: argparse.Namespace) -> int:
    _require(args, "preferences", "out")
    pairs = datasets.read_preferences(args.preferences)
    if not pairs:
        raise DataError("no preference pairs", args.preferences)
    rm = train_reward_model(pairs, epochs=args.epochs, lr=args.lr)
    rm.save(args.out)
    line = f"train_accuracy={pairwise_accuracy(rm, pairs):.4f}"
    if args.heldout:
        line += f" heldout_accuracy={pairwise_accuracy(rm, datasets.read_preferences(args.heldout)):.4f}"
    print(line)
    return EXIT_OK


def cmd_sft(args: argparse.Namespace) -> int:
    overrides = {
        "algorithm": "sft", "thinking": args.thinking, "epochs": args.epochs, "sft_lr": args.lr,
        "sft_batch_size": args.batch_size, "dim": args.dim,
        "max_completion_tokens": args.max_completion_tokens,
    }
    cfg = resolve_config(args, overrides)
    if args.print_config:
        return _print_config(cfg)
    _require(args, "demos", "out")
    demos = datasets.read_demos(args.demos)
    if not demos:
        raise DataError("no demonstrations", args.demos)
    kind = cfg.kind
    if args.checkpoint_in:
        params = load_checkpoint(args.checkpoint_in).params
    else:
        params = init_params(task_vocab([d.prompt + d.thought + d.response for d in demos], kind), cfg.dim, cfg.seed)
    try:
        params, rows = sft_train(params, demos, cfg)
    except InvalidInputError as e:
        raise DataError(str(e), args.demos) from None
    _write_run(_out_dir(args.out), params, cfg, rows, len(rows))
    print(f"sft: {len(rows)} steps, final loss {rows[-1].loss:.6f}, wrote {os.path.join(args.out, CHECKPOINT_FILE)}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {
        "algorithm": args.algo, "mode": args.mode, "thinking": args.thinking, "template": args.template,
        "steps": args.steps, "actor_lr": args.lr, "critic_lr": args.critic_lr, "dpo_lr": args.dpo_lr,
        "batch_size": args.batch_size, "dpo_batch_size": args.dpo_batch_size, "epochs": args.epochs,
        "samples_per_prompt": args.samples_per_prompt, "length_bonus": args.length_bonus,
        "max_prompt_tokens": args.max_prompt_tokens, "max_completion_tokens": args.max_completion_tokens,
        "dim": args.dim, **_reward_overrides(args.reward),
    }
    explicit: set[str] = set()
    cfg = resolve_config(args, overrides, explicit=explicit)
    if args.print_config:
        return _print_config(cfg)
    _require(args, "prompts", "out")
    if cfg.algorithm is Algorithm.SFT:
        raise UsageError("train runs dpo, ppo or grpo; use the sft subcommand for SFT")
    kind = cfg.kind
    tasks = datasets.read_prompts(args.prompts)
    if not tasks:
        raise DataError("no prompts", args.prompts)
    eval_path = args.eval_prompts or args.prompts
    eval_tasks = datasets.read_prompts(eval_path) if args.eval_prompts else tasks

    if cfg.mode is Mode.WARMSTART:
        if not args.checkpoint_in:
            raise UsageError("warmstart mode needs --checkpoint-in (run sft first)")
        params = load_checkpoint(args.checkpoint_in).params
        if params.dim != cfg.dim:
            cfg = cfg.replace(dim=params.dim)
    else:
        if args.checkpoint_in:
            raise UsageError("zero mode starts from fresh parameters; drop --checkpoint-in")
        texts = [t.prompt + (t.gold or "") for t in list(tasks) + list(eval_tasks)]
        params = init_params(task_vocab(texts, kind), cfg.dim, cfg.seed)
        if "max_prompt_tokens" not in explicit:
            # The instruction prefix alone outgrows the desk-scale default.
            needed = max(len(params.vocab.encode(render_prompt(kind, t.prompt))) for t in list(tasks) + list(eval_tasks))
            if needed > cfg.max_prompt_tokens:
                cfg = cfg.replace(max_prompt_tokens=min(needed, PROMPT_TOKEN_CEILING))
    _check_vocab(params.vocab, kind, tasks, args.prompts)
    _check_vocab(params.vocab, kind, eval_tasks, eval_path)

    source = _reward_from_config(cfg)
    ref = snapshot_reference(params)
    if cfg.algorithm is Algorithm.DPO:
        params, rows, _ = dpo_round(params, ref, tasks, source, cfg)
    else:
        params, rows = rl_train(params, tasks, source, cfg)
    out = _out_dir(args.out)
    _write_run(out, params, cfg, rows, len(rows))
    res = evaluate(params, ref, eval_tasks, source, args.eval_samples, cfg.seed, cfg)
    line = format_eval(getattr(source, "name", cfg.reward), res)
    with open(os.path.join(out, EVAL_FILE), "w", encoding="utf-8", newline="\n") as f:
        f.write(line + "\n")
    print(line)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    _require(args, "checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    try:
        base = TrainConfig.from_dict(ckpt.config).to_dict()
    except InvalidInputError as e:
        raise DataError(f"bad config in checkpoint: {e}", args.checkpoint) from None
    cfg = resolve_config(args, {}, base)
    if args.print_config:
        return _print_config(cfg)
    _require(args, "prompts")
    tasks = datasets.read_prompts(args.prompts)
    if not tasks:
        raise DataError("no prompts", args.prompts)
    _check_vocab(ckpt.params.vocab, cfg.kind, tasks, args.prompts)
    ref = load_checkpoint(args.ref).params if args.ref else ckpt.params
    if ref.vocab != ckpt.params.vocab:
        raise DataError("reference checkpoint uses a different vocabulary", args.ref)
    lines = []
    for spec in args.reward or ["verifier"]:
        source = parse_reward(spec)
        res = evaluate(ckpt.params, ref, tasks, source, args.samples, cfg.seed, cfg)
        lines.append(format_eval(spec, res))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    return EXIT_OK


# -- plotting ---------------------------------------------------------------

SPARK_LEVELS = "▁▂▃▄▅▆▇█"
CURVES = (("reward", "mean_reward"), ("thoughts", "mean_thought_tokens"), ("responses", "mean_response_tokens"))


def downsample(values: Sequence[float], width: int) -> list[float]:
    """Window means over at most ``width`` contiguous, near-equal chunks."""
    n = len(values)
    if n <= width:
        return list(values)
    bounds = [round(i * n / width) for i in range(width + 1)]
    return [math.fsum(values[a:b]) / (b - a) for a, b in zip(bounds, bounds[1:])]


def spark_levels(values: Sequence[float]) -> list[int]:
    lo, hi = min(values), max(values)
    top = len(SPARK_LEVELS) - 1
    if hi == lo:
        return [0] * len(values)
    return [min(top, int((v - lo) / (hi - lo) * top + 0.5)) for v in values]


def render_text_plot(rows: Sequence[MetricsRow], width: int = 60) -> str:
    lines = []
    for label, attr in CURVES:
        series = [getattr(r, attr) for r in rows]
        if all(math.isnan(v) for v in series):
            continue
        pts = downsample([v for v in series if not math.isnan(v)], width)
        spark = "".join(SPARK_LEVELS[k] for k in spark_levels(pts))
        lines.append(f"{label:<10} {spark}  first={pts[0]:.4g} last={pts[-1]:.4g} "
                     f"min={min(pts):.4g} max={max(pts):.4g}")
    return "\n".join(lines) + "\n"


def _plot_png(rows: Sequence[MetricsRow], path: str) -> bool:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    steps = [r.step for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    axes[0].plot(steps, [r.mean_reward for r in rows])
    axes[0].set_title("reward")
    axes[1].plot(steps, [r.mean_thought_tokens for r in rows], label="thoughts")
    axes[1].plot(steps, [r.mean_response_tokens for r in rows], label="responses")
    axes[1].set_title("length (tokens)")
    axes[1].legend()
    for ax in axes:
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return True


def cmd_plot_metrics(args: argparse.Namespace) -> int:
    _require(args, "metrics", "out")
    rows = read_metrics(args.metrics)
    fmt = args.format or ("png" if args.out.lower().endswith(".png") else "text")
    if fmt == "png":
        if _plot_png(rows, args.out):
            print(f"wrote {args.out}")
            return EXIT_OK
        print("matplotlib unavailable; writing text plot", file=sys.stderr)
    text = render_text_plot(rows)
    out = args.out if fmt == "text" else os.path.splitext(args.out)[0] + ".txt"
    with open(out, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_analyze_traits(args: argparse.Namespace) -> int:
    _require(args, "corpus_a", "corpus_b")
    pairs = traitlab.align_corpora(datasets.read_thoughts(args.corpus_a), datasets.read_thoughts(args.corpus_b))
    judge = traitlab.StubJudge()
    seed = _seed_override(args) or 0
    result = traitlab.analyze(judge, pairs, batches=args.batches, batch_size=args.batch_size, seed=seed)
    csv_text = result.table.to_csv()
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(csv_text)
    sys.stdout.write(csv_text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help=f"run seed (falls back to ${SEED_ENV})")
    p.add_argument("--threads", type=int, help="worker threads for rollout scoring (default 1)")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlmtkit", description="Desk-scale RLHF / RLVR training toolkit for thinking and plain policies.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write the synthetic digit-sorting datasets")
    _common(p)
    p.add_argument("--out")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-eval", type=int, default=200)
    p.add_argument("--n-pairs", type=int, default=600)
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("train-rm", help="fit a Bradley-Terry reward model on preference pairs")
    _common(p)
    p.add_argument("--preferences")
    p.add_argument("--heldout")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1.0)
    p.set_defaults(fn=cmd_train_rm)

    p = sub.add_parser("sft", help="warm-start SFT on demonstrations")
    _common(p)
    p.add_argument("--demos")
    p.add_argument("--out")
    p.add_argument("--checkpoint-in")
    p.add_argument("--epochs", type=int, help="passes over the demos (default 2)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--max-completion-tokens", type=int)
    p.add_argument("--thinking", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(fn=cmd_sft)

    p = sub.add_parser("train", help="on-policy RL: grpo, ppo or dpo")
    _common(p)
    p.add_argument("--algo", choices=[a.value for a in Algorithm if a is not Algorithm.SFT])
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--thinking", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--template", choices=[k.value for k in TemplateKind])
    p.add_argument("--checkpoint-in")
    p.add_argument("--prompts")
    p.add_argument("--eval-prompts")
    p.add_argument("--reward", help="verifier or rm:PATH")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="actor learning rate")
    p.add_argument("--critic-lr", type=float)
    p.add_argument("--dpo-lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dpo-batch-size", type=int)
    p.add_argument("--samples-per-prompt", type=int)
    p.add_argument("--length-bonus", type=float)
    p.add_argument("--max-prompt-tokens", type=int, help="default 64; zero mode raises it to fit the prefix")
    p.add_argument("--max-completion-tokens", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--eval-samples", type=int, default=4)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a reference")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--ref", help="reference checkpoint (default: the checkpoint itself)")
    p.add_argument("--prompts")
    p.add_argument("--reward", action="append", help="verifier or rm:PATH; repeatable")
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plot-metrics", help="plot reward and length curves from a metrics file")
    p.add_argument("metrics")
    p.add_argument("--out")
    p.add_argument("--format", choices=["png", "text"])
    p.set_defaults(fn=cmd_plot_metrics)

    p = sub.add_parser("analyze-traits", help="trait win rates between two thought corpora")
    _common(p)
    p.add_argument("--corpus-a")
    p.add_argument("--corpus-b")
    p.add_argument("--judge", choices=["stub"], default="stub")
    p.add_argument("--out")
    p.add_argument("--batch-size", type=int, default=traitlab.DEFAULT_BATCH_SIZE)
    p.add_argument("--batches", type=int, default=traitlab.DEFAULT_BATCHES)
    p.set_defaults(fn=cmd_analyze_traits)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.fn(args)
    except (UsageError, InvalidInputError) as e:
        print(f"rlmtkit {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, JudgeError) as e:
        print(f"rlmtkit {args.command}: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"rlmtkit {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
