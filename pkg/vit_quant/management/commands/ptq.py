import argparse
import logging

from django.core.management.base import BaseCommand, CommandError

from vit_quant import pipeline
from vit_quant.config import build_run_config
from vit_quant.exceptions import VitQuantError
from vit_quant.tasks import reproduce_ablation_task, score_importance_task

logger = logging.getLogger(__name__)

INTERNAL_EXIT_CODE = 70

STAGES = {
    "gen-data": (pipeline.stage_gen_data, "Generate the synthetic train and eval sets."),
    "train-toy": (pipeline.stage_train, "Train the toy ViT checkpoint."),
    "calibrate": (pipeline.stage_calibrate, "Sample the calibration set and record activations."),
    "score-importance": (pipeline.stage_score_importance, "Score per-layer importance by relevance propagation."),
    "allocate-bits": (pipeline.stage_allocate_bits, "Allocate per-layer bit widths."),
    "quantize": (pipeline.stage_quantize, "Reparameterize and calibrate every quantizer."),
    "evaluate": (pipeline.stage_evaluate, "Evaluate full-precision and quantized models."),
    "report": (pipeline.stage_report, "Summarise the evaluation reports of a run."),
    "reproduce-ablation": (pipeline.reproduce_ablation, "Run the quantizer and bit-allocation ablation."),
}
QUEUED = {
    "score-importance": score_importance_task,
    "reproduce-ablation": reproduce_ablation_task,
}


def _common_options():
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", help="YAML or JSON run config file.")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--bits", dest="base_bits", type=int, help="Base bit width.")
    parser.add_argument("--mode", choices=["uniform", "paper", "greedy", "boost"])
    parser.add_argument("--ln-mode", choices=["layerwise", "channelwise", "scale_reparam", "clipped_cw"])
    parser.add_argument("--n-sigma", type=float)
    parser.add_argument("--percentile", type=float)
    parser.add_argument("--calib-size", type=int)
    parser.add_argument("--importance-samples", type=int)
    parser.add_argument("--target", choices=["label", "predicted"])
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--out", dest="run_dir", help="Run directory.")
    return parser


class Command(BaseCommand):
    help = "Mixed-precision post-training quantization pipeline for the toy ViT."

    def add_arguments(self, parser):
        common = _common_options()
        stages = parser.add_subparsers(dest="stage", required=True, metavar="stage")
        for name, (_, description) in STAGES.items():
            sub = stages.add_parser(name, parents=[common], help=description, description=description)
            if name in QUEUED:
                sub.add_argument("--queue", action="store_true", help="Submit to the Celery worker.")

    def handle(self, *args, **options):
        stage = options["stage"]
        overrides = {
            key: options.get(key)
            for key in (
                "seed",
                "base_bits",
                "mode",
                "ln_mode",
                "n_sigma",
                "percentile",
                "calib_size",
                "importance_samples",
                "target",
                "epochs",
                "run_dir",
            )
        }
        try:
            cfg = build_run_config(options.get("config"), **overrides)
            if options.get("queue"):
                return self._submit(stage, cfg)
            runner, _ = STAGES[stage]
            logger.info(f"Stage {stage} started in {cfg.run_dir}")
            summary = runner(cfg)
            logger.info(f"Stage {stage} finished")
        except VitQuantError as exc:
            raise CommandError(self._error_line(exc.code, stage, exc), returncode=exc.exit_code) from exc
        except CommandError:
            raise
        except Exception as exc:
            logger.exception(f"Stage {stage} failed unexpectedly")
            raise CommandError(self._error_line("internal", stage, exc), returncode=INTERNAL_EXIT_CODE) from exc
        return summary

    def _submit(self, stage, cfg):
        result = QUEUED[stage].delay(cfg.to_dict())
        if result.ready():
            return result.get()
        return f"{stage} queued as task {result.id}"

    @staticmethod
    def _error_line(code, stage, exc):
        message = " ".join(str(exc).split())
        return f"error code={code} stage={stage} message={message}"
