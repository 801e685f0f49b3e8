"""Small models and run configs shared by the test modules."""
from vit_quant.config import RunConfig
from vit_quant.datasets import generate_toy_dataset
from vit_quant.vit import ViTConfig, init_params

SMALL_VIT = {"image_size": 16, "patch_size": 8, "embed_dim": 16, "heads": 2, "blocks": 4, "classes": 3}


def small_config(**changes):
    return ViTConfig(**{**SMALL_VIT, **changes})


def small_params(seed=0, **changes):
    return init_params(small_config(**changes), seed)


def small_dataset(n_per_class=2, seed=0, split="train"):
    return generate_toy_dataset(seed, n_per_class, image_size=SMALL_VIT["image_size"], split=split)


def small_run_config(run_dir, **changes):
    data = {
        "vit": dict(SMALL_VIT),
        "train_per_class": 4,
        "eval_per_class": 4,
        "epochs": 1,
        "batch_size": 8,
        "calib_size": 6,
        "importance_samples": 4,
        "run_dir": str(run_dir),
    }
    data.update(changes)
    return RunConfig.from_dict(data)
