"""Command-line entry point: corpus generation, training, detection, drive simulation, sweeps, recall model."""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError

import config
from analysis import RecallModelParams, recall_table_row
from audio_io import load_wav
from dnn import load_network, save_network
from eval_harness import (CorpusSpec, assign_drive_timestamps, load_corpus, relative_improvement, score_corpus,
                          sweep_double, sweep_single, synthesize_corpus, train_models, with_timestamps,
                          write_corpus, write_summary_csv, write_sweep_csv)
from fusion import FusionConfig, KwsPipeline, SensitivityPair
from kws_scorer import write_events_jsonl
from telemetry import (TrajectoryParams, generate_trajectory, maneuver_states, read_trace_csv, write_labels_csv,
                       write_states_jsonl, write_trace_csv)
from vad import VadConfig, VoiceActivityDetector

logger = logging.getLogger(__name__)

EXIT_DETECTED = 0
EXIT_NO_DETECTION = 1
EXIT_ERROR = 2


class RunConfig(BaseModel):
    """Everything a command may need; flags > --config file > these defaults."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    model_dir: Path = config.MODEL_DIR
    output_dir: Path = config.OUTPUT_DIR
    # fusion
    sen_1: float = config.SEN_1
    sen_2: float = config.SEN_2
    s_thd: float = config.S_THD
    d_thd: float = config.D_THD
    w_s: int = config.W_SMOOTH
    w_max: int = config.W_MAX
    staleness_limit_s: float = config.STALENESS_LIMIT_S
    refractory_frames: int = config.REFRACTORY_FRAMES
    # corpus
    n_positive: int = Field(default=config.N_POSITIVE, ge=0)
    n_negative: int = Field(default=config.N_NEGATIVE, ge=0)
    snr_low_db: float = config.SNR_RANGE_DB[0]
    snr_high_db: float = config.SNR_RANGE_DB[1]
    inside_fraction: float = Field(default=config.INSIDE_MANEUVER_FRACTION, ge=0.0, le=1.0)
    # training
    hidden_layers: int = Field(default=config.HIDDEN_LAYERS, ge=1)
    hidden_nodes: int = Field(default=config.HIDDEN_NODES, ge=1)
    epochs: int = Field(default=config.EPOCHS, ge=0)
    learning_rate: float = Field(default=config.LEARNING_RATE, ge=0.0)
    batch_size: int = Field(default=config.BATCH_SIZE, ge=1)
    vad_components: int = Field(default=config.VAD_COMPONENTS, ge=1)
    em_iters: int = Field(default=config.VAD_EM_ITERS, ge=0)
    seed: int = config.SEED
    workers: int = Field(default=config.EVAL_WORKERS, ge=1)

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(sen_1=self.sen_1, sen_2=self.sen_2, s_thd=self.s_thd, d_thd=self.d_thd,
                            w_s=self.w_s, w_max=self.w_max, staleness_limit_s=self.staleness_limit_s,
                            refractory_frames=self.refractory_frames)

    @property
    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(n_positive=self.n_positive, n_negative=self.n_negative,
                          snr_range_db=(self.snr_low_db, self.snr_high_db), seed=self.seed)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        payload = json.loads(path.read_text())
        if not isinstance(payload, dict):
            raise ValueError(f"Config file {path} must hold a JSON object, got {type(payload).__name__}")
        values.update(payload)
    for name in RunConfig.model_fields:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return RunConfig(**values)


def load_pipeline(run: RunConfig) -> KwsPipeline:
    params = load_network(run.model_dir / config.DNN_FILE)
    vad = VoiceActivityDetector.load(run.model_dir, VadConfig())
    logger.info(f"Loaded models from {run.model_dir}")
    return KwsPipeline(params, vad, run.fusion)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_make_corpus(args, run: RunConfig) -> int:
    out_dir = Path(args.out) if args.out else run.output_dir / "corpus"
    manifest = write_corpus(synthesize_corpus(run.corpus_spec), out_dir)
    print(manifest)
    return 0


def cmd_train(args, run: RunConfig) -> int:
    corpus = load_corpus(args.manifest)
    models = train_models(corpus, run.hidden_layers, run.hidden_nodes, run.epochs, run.learning_rate,
                          run.batch_size, run.vad_components, run.em_iters, run.seed)
    save_network(models.params, run.model_dir / config.DNN_FILE)
    models.vad.save(run.model_dir)
    loss = "n/a" if models.final_loss is None else f"{models.final_loss:.6f}"
    print(f"final_loss={loss} frame_accuracy={models.frame_accuracy:.4f}")
    return 0


def cmd_detect(args, run: RunConfig) -> int:
    try:
        audio = load_wav(args.audio, start_time=args.start_time)
        pipeline = load_pipeline(run)
        if args.trace:
            events = pipeline.run_fused(audio, read_trace_csv(args.trace))
        else:
            events = pipeline.run_single(audio, run.sen_1)
    except Exception as e:
        logger.error(f"Detection failed: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR

    if args.events:
        write_events_jsonl(args.events, events)
    else:
        for event in events:
            print(json.dumps(event.to_dict()))
    logger.info(f"{len(events)} detection(s) in {args.audio}")
    return EXIT_DETECTED if events else EXIT_NO_DETECTION


def cmd_simulate_drive(args, run: RunConfig) -> int:
    params = TrajectoryParams(cruise_speed=args.cruise_speed, noise_sigma_m=args.noise_sigma)
    trajectory = generate_trajectory(args.kind, params, run.seed)
    out_dir = Path(args.out) if args.out else run.output_dir / f"drive_{args.kind}"
    write_trace_csv(out_dir / "trace.csv", trajectory.samples)
    write_labels_csv(out_dir / "labels.csv", trajectory)
    states = maneuver_states(trajectory.samples, run.fusion.thresholds)
    write_states_jsonl(out_dir / "states.jsonl", states)
    if args.plot:
        from plots import plot_trajectory
        plot_trajectory(trajectory, out_dir / "trajectory.png")
    sensitive = sum(s.state.value == "sensitive" for s in states)
    print(f"{out_dir} samples={len(trajectory.samples)} sensitive_states={sensitive}")
    return 0


def _parse_pair(text: str) -> SensitivityPair:
    try:
        low, high = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected SEN_1:SEN_2, got {text!r}") from None
    return SensitivityPair(low, high)


def cmd_sweep(args, run: RunConfig) -> int:
    sensitivities = args.sensitivities if args.sensitivities is not None else config.SINGLE_SENSITIVITIES
    pairs = args.pairs if args.pairs is not None else [SensitivityPair(*p) for p in config.SENSITIVITY_PAIRS]
    if args.mode in ("single", "both") and not sensitivities:
        args.parser.error("empty sensitivity grid")
    if args.mode in ("double", "both") and not pairs:
        args.parser.error("empty sensitivity pair grid")

    corpus = load_corpus(args.manifest)
    pipeline = load_pipeline(run)
    out_dir = Path(args.out) if args.out else run.output_dir / "sweep"

    states = []
    if args.mode != "single":
        if args.trace:
            trace = read_trace_csv(args.trace)
        else:
            trace = generate_trajectory(args.kind, TrajectoryParams(), run.seed).samples
        states = maneuver_states(trace, run.fusion.thresholds)
        corpus = with_timestamps(corpus, assign_drive_timestamps(corpus, states, run.inside_fraction, run.seed))
    scored = score_corpus(pipeline, corpus, run.workers)

    summaries = {}
    if args.mode in ("single", "both"):
        summaries["single"] = sweep_single(sensitivities, corpus, pipeline, scored)
        write_sweep_csv(out_dir / "single_results.csv", summaries["single"])
    if args.mode in ("double", "both"):
        summaries["fused"] = sweep_double(pairs, corpus, states, pipeline, scored)
        write_sweep_csv(out_dir / "double_results.csv", summaries["fused"])
    improvement = relative_improvement(summaries["single"], summaries["fused"]) if args.mode == "both" else None
    write_summary_csv(out_dir / "summary.csv", summaries, improvement)

    if args.plot:
        from plots import plot_sensitivity_sweep
        for name, summary in summaries.items():
            plot_sensitivity_sweep(summary, out_dir / f"{name}_sweep.png", double=name == "fused")

    for name, s in summaries.items():
        print(f"{name}: mean_precision={s.mean_precision:.4f} mse_precision={s.mse_precision:.6f} "
              f"mean_recall={s.mean_recall:.4f} mse_recall={s.mse_recall:.6f}")
    return 0


def cmd_recall_model(args, run: RunConfig) -> int:
    params = RecallModelParams(p1=args.p1, p2=args.p2, p3=args.p3, k=args.k)
    row = recall_table_row(params, args.trials, run.seed)
    writer = csv.DictWriter(sys.stdout, fieldnames=list(row))
    writer.writeheader()
    writer.writerow(row)
    return 0


def cmd_config(args, run: RunConfig) -> int:
    print(run.model_dump_json(indent=2))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON file with run configuration keys")
    parser.add_argument("--model-dir", type=Path)
    parser.add_argument("--output-dir", type=Path)
    parser.add_argument("--seed", type=int)


def _add_fusion(parser: argparse.ArgumentParser):
    for flag, kind in (("--sen-1", float), ("--sen-2", float), ("--s-thd", float), ("--d-thd", float),
                       ("--w-s", int), ("--w-max", int), ("--staleness-limit-s", float),
                       ("--refractory-frames", int)):
        parser.add_argument(flag, type=kind)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kws", description="In-vehicle keyword spotting with telemetry fusion")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="synthesize a labelled test corpus")
    _add_common(p)
    p.add_argument("--out")
    p.add_argument("--n-positive", type=int)
    p.add_argument("--n-negative", type=int)
    p.add_argument("--snr-low-db", type=float)
    p.add_argument("--snr-high-db", type=float)
    p.set_defaults(handler=cmd_make_corpus)

    p = sub.add_parser("train", help="train VAD GMMs and the keyword DNN")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    for flag, kind in (("--hidden-layers", int), ("--hidden-nodes", int), ("--epochs", int),
                       ("--learning-rate", float), ("--batch-size", int), ("--vad-components", int),
                       ("--em-iters", int)):
        p.add_argument(flag, type=kind)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("detect", help="detect the keyword in a WAV file")
    _add_common(p)
    _add_fusion(p)
    p.add_argument("audio")
    p.add_argument("--trace", help="GPS trace CSV; without it detection runs at sen_1 only")
    p.add_argument("--start-time", type=float, default=0.0, help="drive time of the first sample")
    p.add_argument("--events", help="write events JSONL here instead of standard output")
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("simulate-drive", help="generate a synthetic GPS trace")
    _add_common(p)
    _add_fusion(p)
    p.add_argument("kind", choices=["straight", "turn", "u_turn", "roundabout"])
    p.add_argument("--out")
    p.add_argument("--cruise-speed", type=float, default=12.0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(handler=cmd_simulate_drive)

    p = sub.add_parser("sweep", help="precision / recall over sensitivity grids")
    _add_common(p)
    _add_fusion(p)
    p.add_argument("mode", choices=["single", "double", "both"])
    p.add_argument("--manifest", required=True)
    p.add_argument("--trace", help="drive trace CSV; default is a generated drive of --kind")
    p.add_argument("--kind", default="u_turn", choices=["turn", "u_turn", "roundabout"])
    p.add_argument("--sensitivities", type=float, nargs="*")
    p.add_argument("--pairs", type=_parse_pair, nargs="*", help="SEN_1:SEN_2 ...")
    p.add_argument("--inside-fraction", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(handler=cmd_sweep, parser=p)

    p = sub.add_parser("recall-model", help="analytic and Monte Carlo fused recall")
    _add_common(p)
    p.add_argument("--p1", type=float, required=True)
    p.add_argument("--p2", type=float, required=True)
    p.add_argument("--p3", type=float, required=True)
    p.add_argument("--k", type=float, required=True)
    p.add_argument("--trials", type=int, default=1_000_000)
    p.set_defaults(handler=cmd_recall_model)

    p = sub.add_parser("config", help="configuration helpers")
    _add_common(p)
    p.add_argument("action", choices=["dump"])
    p.set_defaults(handler=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, config.LOG_LEVEL),
        format=config.LOG_FORMAT,
    )
    try:
        run = resolve_config(args)
        return args.handler(args, run)
    except (ValidationError, ValueError, OSError, RuntimeError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
