import logging

from celery import shared_task

from .config import RunConfig
from .pipeline import reproduce_ablation, stage_score_importance

logger = logging.getLogger(__name__)


@shared_task
def score_importance_task(config):
    """
    Scores layer importance for the run described by `config` (a RunConfig dict).
    """
    cfg = RunConfig.from_dict(config)
    summary = stage_score_importance(cfg)
    logger.info(f"score-importance finished for {cfg.run_dir}")
    return f"score-importance: {summary}"


@shared_task
def reproduce_ablation_task(config):
    """
    Runs the full quantizer and bit-allocation ablation for `config`.
    """
    cfg = RunConfig.from_dict(config)
    summary = reproduce_ablation(cfg)
    logger.info(f"reproduce-ablation finished for {cfg.run_dir}")
    return f"reproduce-ablation: {summary}"
