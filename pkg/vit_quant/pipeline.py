"""Stage runners. Every stage reads its inputs from the run directory and writes its outputs there."""
import logging
import time
from pathlib import Path

import numpy as np

from .bit_allocator import (
    AllocationMode,
    BitAllocation,
    PRESETS,
    allocate_bits,
    allocate_preset,
    layer_param_counts,
    model_size_bits,
    uniform_allocation,
)
from .crl import LNMode, apply_crl
from .datasets import generate_toy_dataset, sample_calibration
from .exceptions import AblationCheckError, CalibrationError, FormatError
from .layers import LayerId, LayerKind
from .lrp import ImportanceTable, score_importance
from .quantizers import (
    FULL_PRECISION_BITS,
    Granularity,
    LayerQuant,
    QuantModel,
    Scheme,
    log_calibrate,
    uniform_calibrate,
)
from .reports import AblationReport, EvalReport, report_table, write_eval_report
from .storage import (
    load_archive,
    load_dataset,
    load_params,
    load_qmodel,
    read_json,
    read_text,
    save_archive,
    save_dataset,
    save_params,
    save_qmodel,
    write_text,
)
from .vit import forward, init_params, plant_ln_outliers, predict_logits, train_toy

logger = logging.getLogger(__name__)

CALIB_BATCH = 16


class RunPaths:
    def __init__(self, root):
        self.root = Path(root)

    train = property(lambda self: self.root / "data" / "train")
    eval = property(lambda self: self.root / "data" / "eval")
    calib = property(lambda self: self.root / "data" / "calib")
    activations = property(lambda self: self.root / "calib" / "activations")
    params = property(lambda self: self.root / "model" / "params")
    importance = property(lambda self: self.root / "importance.csv")
    allocation = property(lambda self: self.root / "allocation.csv")
    qmodel = property(lambda self: self.root / "quant" / "qmodel")
    reports = property(lambda self: self.root / "reports")

    @staticmethod
    def exists(stem):
        return Path(f"{stem}.json").exists() or Path(stem).exists()


# Calibration


def collect_activations(params, calib):
    """Pool the inputs observed at every layer over the calibration images (batch axis first)."""
    if len(calib) == 0:
        raise CalibrationError("calibration set is empty")
    pooled = {}
    for start in range(0, len(calib), CALIB_BATCH):
        record = forward(params, calib.images[start : start + CALIB_BATCH], hooks=True).record
        for layer_id, values in record.values().items():
            pooled.setdefault(layer_id, []).append(values)
    return {
        layer_id: tuple(np.concatenate(slot, axis=0) for slot in zip(*chunks))
        for layer_id, chunks in pooled.items()
    }


def _activation_quant(layer_id, samples, bits, percentile):
    if layer_id.kind is LayerKind.ATTN:
        return tuple(log_calibrate(value, bits, Scheme.LOGSQRT2) for value in samples)
    return tuple(uniform_calibrate(value, bits, percentile=percentile) for value in samples)


def quantize_model(params, activations, alloc, cfg, calib_images=None):
    """Fold the LayerNorm reparameterization and calibrate every quantizer of the allocation."""
    alloc.check_config(params.config)
    started = time.perf_counter()
    a_bits = {layer_id: alloc.a_bits(layer_id) for layer_id in alloc.layers}
    crl = apply_crl(params, activations, a_bits, n_sigma=cfg.n_sigma, mode=cfg.ln_mode, percentile=cfg.percentile)

    layers = {}
    for layer_id in alloc.layer_ids():
        samples = activations.get(layer_id)
        if samples is None:
            raise CalibrationError(f"no calibration data for {layer_id}", layer=str(layer_id))
        if layer_id in crl.site_params:
            inputs = (crl.site_params[layer_id],)
        else:
            inputs = _activation_quant(layer_id, samples, alloc.a_bits(layer_id), cfg.percentile)
        weight = None
        if layer_id.has_weights:
            # weights are fully observed: exact min/max per output channel
            weight = uniform_calibrate(
                crl.params[f"{layer_id.param_prefix}.weight"],
                alloc.w_bits(layer_id),
                percentile=100.0,
                granularity=Granularity.CHANNEL,
            )
        layers[layer_id] = LayerQuant(weight, inputs)

    provenance = {
        "calib_images": int(calib_images if calib_images is not None else len(next(iter(activations.values()))[0])),
        "ln_mode": LNMode(cfg.ln_mode).value,
        "n_sigma": float(cfg.n_sigma),
        "percentile": float(cfg.percentile),
        "seed": int(cfg.seed),
    }
    qmodel = QuantModel(layers, alloc, crl.folded, provenance)
    logger.info(
        f"Calibrated {len(layers)} layers in {time.perf_counter() - started:.3f}s "
        f"({provenance['ln_mode']}, base {alloc.base_bits} bits)"
    )
    return qmodel


def calibrate_model(params, calib, alloc, cfg):
    activations = collect_activations(params, calib)
    return quantize_model(params, activations, alloc, cfg, calib_images=len(calib))


# Evaluation


def full_precision_size(params):
    return sum(count * FULL_PRECISION_BITS for count in layer_param_counts(params).values())


def evaluate(params, qmodel, dataset, name=None, provenance=None):
    dataset.check_against(params.config)
    fp_logits = predict_logits(params, dataset.images)
    logits = fp_logits if qmodel is None else predict_logits(params, dataset.images, qmodel=qmodel)
    predictions = logits.argmax(axis=-1)
    if qmodel is None:
        size = baseline = full_precision_size(params)
        bits = {}
    else:
        alloc = qmodel.allocation
        size = model_size_bits(alloc, params)
        baseline = model_size_bits(uniform_allocation(params.config, alloc.base_bits), params)
        bits = {str(layer_id): str(alloc[layer_id]) for layer_id in alloc.layer_ids()}
    report = EvalReport(
        name=name or ("full-precision" if qmodel is None else f"{qmodel.allocation.mode.value}-{qmodel.allocation.base_bits}"),
        images=len(dataset),
        accuracy=float(np.mean(predictions == dataset.labels)),
        agreement=float(np.mean(predictions == fp_logits.argmax(axis=-1))),
        mean_abs_logit_deviation=float(np.mean(np.abs(logits - fp_logits))),
        size_bits=int(size),
        baseline_size_bits=int(baseline),
        bits=bits,
        provenance=dict(provenance or {}),
    )
    logger.info(f"Evaluated {report.name}: top-1 {100 * report.accuracy:.2f}% agreement {100 * report.agreement:.2f}%")
    return report


# Stages


def _provenance(cfg):
    return {"config_digest": cfg.digest(), "seed": cfg.seed}


def _require(stem, stage):
    if not RunPaths.exists(stem):
        raise FormatError(f"missing artifact {stem}; run `{stage}` first", path=str(stem))


def stage_gen_data(cfg):
    paths = RunPaths(cfg.run_dir)
    vit = cfg.vit
    train = generate_toy_dataset(cfg.seed, cfg.train_per_class, vit.image_size, "train", classes=vit.classes)
    held_out = generate_toy_dataset(cfg.seed, cfg.eval_per_class, vit.image_size, "eval", classes=vit.classes)
    save_dataset(paths.train, train)
    save_dataset(paths.eval, held_out)
    return f"{len(train)} training and {len(held_out)} evaluation images in {paths.root / 'data'}"


def stage_train(cfg):
    paths = RunPaths(cfg.run_dir)
    _require(paths.train, "gen-data")
    train = load_dataset(paths.train)
    train.check_against(cfg.vit)
    params = train_toy(init_params(cfg.vit, cfg.seed), train, cfg.epochs, cfg.lr, cfg.seed, cfg.batch_size)
    params = plant_ln_outliers(params, cfg.ln_outliers, cfg.outlier_gain)
    save_params(paths.params, params)
    # downstream stages see the stored precision
    stored = load_params(paths.params)
    accuracy = float(np.mean(predict_logits(stored, train.images).argmax(axis=-1) == train.labels))
    return f"trained {cfg.epochs} epochs, train top-1 {100 * accuracy:.2f}%, saved {paths.params}"


def stage_calibrate(cfg):
    paths = RunPaths(cfg.run_dir)
    _require(paths.params, "train-toy")
    _require(paths.train, "gen-data")
    params = load_params(paths.params)
    calib = sample_calibration(load_dataset(paths.train), cfg.calib_size, cfg.seed)
    activations = collect_activations(params, calib)
    entries = [
        (f"{layer_id}.input{slot}", value, "<f8")
        for layer_id in sorted(activations, key=lambda layer_id: layer_id.sort_key)
        for slot, value in enumerate(activations[layer_id])
    ]
    save_dataset(paths.calib, calib)
    save_archive(paths.activations, entries, {"kind": "activations", "images": len(calib)})
    return f"observed {len(activations)} layers on {len(calib)} calibration images"


def load_activations(stem):
    tensors, meta = load_archive(stem)
    if meta.get("kind") != "activations":
        raise FormatError("archive does not hold calibration activations", path=str(stem))
    pooled = {}
    for name, value in tensors.items():
        layer, _, slot = name.rpartition(".input")
        pooled.setdefault(LayerId.parse(layer), {})[int(slot)] = value
    return {layer_id: tuple(slots[i] for i in sorted(slots)) for layer_id, slots in pooled.items()}, meta


def stage_score_importance(cfg):
    paths = RunPaths(cfg.run_dir)
    _require(paths.params, "train-toy")
    _require(paths.train, "gen-data")
    params = load_params(paths.params)
    table = score_importance(params, load_dataset(paths.train), cfg.importance_samples, cfg.seed, cfg.target)
    write_text(paths.importance, table.to_csv())
    top = table.ranking()[-1]
    return f"scored {len(table.importance)} layers over {table.samples} images; most important {top}"


def _load_importance(paths, required):
    if not paths.importance.exists():
        if required:
            raise FormatError(f"missing artifact {paths.importance}; run `score-importance` first")
        return None
    return ImportanceTable.from_csv(read_text(paths.importance))


def build_allocation(cfg, importance, params):
    return allocate_bits(
        importance,
        cfg.base_bits,
        cfg.mode,
        params,
        boost_blocks=cfg.boost_blocks,
        demote_per_block=cfg.demote_per_block,
        demote_depth=cfg.demote_depth,
    )


def stage_allocate_bits(cfg):
    paths = RunPaths(cfg.run_dir)
    mode = AllocationMode(cfg.mode)
    guided = mode in (AllocationMode.PAPER, AllocationMode.GREEDY)
    importance = _load_importance(paths, required=guided)
    alloc = build_allocation(cfg, importance, cfg.vit)
    write_text(paths.allocation, alloc.to_csv())
    size = model_size_bits(alloc, cfg.vit)
    budget = model_size_bits(uniform_allocation(cfg.vit, cfg.base_bits), cfg.vit)
    return f"{mode.value} allocation: {size} bits (uniform budget {budget})"


def stage_quantize(cfg):
    paths = RunPaths(cfg.run_dir)
    _require(paths.params, "train-toy")
    _require(paths.activations, "calibrate")
    params = load_params(paths.params)
    if paths.allocation.exists():
        alloc = BitAllocation.from_csv(read_text(paths.allocation))
    else:
        alloc = uniform_allocation(params.config, cfg.base_bits)
    activations, meta = load_activations(paths.activations)
    qmodel = quantize_model(params, activations, alloc, cfg, calib_images=meta["images"])
    save_qmodel(paths.qmodel, qmodel)
    return f"calibrated {len(qmodel.layers)} layers ({alloc.mode.value}), saved {paths.qmodel}"


def stage_evaluate(cfg):
    paths = RunPaths(cfg.run_dir)
    _require(paths.params, "train-toy")
    _require(paths.eval, "gen-data")
    params = load_params(paths.params)
    held_out = load_dataset(paths.eval)
    reports = [evaluate(params, None, held_out, provenance=_provenance(cfg))]
    if paths.exists(paths.qmodel):
        reports.append(evaluate(params, load_qmodel(paths.qmodel), held_out, provenance=_provenance(cfg)))
    for report in reports:
        write_eval_report(paths.reports, f"eval-{report.name}", report)
    return "; ".join(f"{report.name} top-1 {100 * report.accuracy:.2f}%" for report in reports)


def stage_report(cfg):
    """Collect every evaluation report of the run into one summary table."""
    paths = RunPaths(cfg.run_dir)
    found = sorted(paths.reports.glob("eval-*.json")) if paths.reports.exists() else []
    if not found:
        raise FormatError(f"no evaluation reports under {paths.reports}; run `evaluate` first")
    reports = []
    for path in found:
        data = dict(read_json(path)["report"])
        data.pop("within_budget", None)
        reports.append(EvalReport(**data))
    text = report_table(reports, "summary").export("rst") + "\n"
    write_text(paths.reports / "summary.rst", text)
    return text


# Ablation


def _ensure_model(cfg, paths):
    if not paths.exists(paths.train) or not paths.exists(paths.eval):
        logger.info(stage_gen_data(cfg))
    if not paths.exists(paths.params):
        logger.info(stage_train(cfg))
    params = load_params(paths.params)
    train = load_dataset(paths.train)
    held_out = load_dataset(paths.eval)
    return params, train, held_out


def reproduce_ablation(cfg):
    """Quantizer-mode rows and allocation-preset rows at the configured base width."""
    paths = RunPaths(cfg.run_dir)
    params, train, held_out = _ensure_model(cfg, paths)
    if not paths.importance.exists():
        logger.info(stage_score_importance(cfg))
    importance = _load_importance(paths, required=True)

    calib = sample_calibration(train, cfg.calib_size, cfg.seed)
    activations = collect_activations(params, calib)
    uniform = uniform_allocation(params.config, cfg.base_bits)
    greedy = build_allocation(cfg.evolve(mode=AllocationMode.GREEDY.value), importance, params)
    provenance = _provenance(cfg)

    def run(name, alloc, ln_mode):
        started = time.perf_counter()
        qmodel = quantize_model(params, activations, alloc, cfg.evolve(ln_mode=ln_mode), calib_images=len(calib))
        report = evaluate(params, qmodel, held_out, name=name, provenance=provenance)
        logger.info(f"Ablation row {name} took {time.perf_counter() - started:.2f}s")
        return report

    quantizer_rows = [evaluate(params, None, held_out, provenance=provenance)]
    for ln_mode in LNMode:
        quantizer_rows.append(run(f"{ln_mode.value}-{cfg.base_bits}", uniform, ln_mode.value))
    quantizer_rows.append(run(f"clipped_cw+mp-{cfg.base_bits}", greedy, LNMode.CLIPPED_CW.value))

    allocation_rows = []
    for preset in PRESETS:
        alloc = allocate_preset(importance, cfg.base_bits, preset, params, demote_depth=cfg.demote_depth)
        allocation_rows.append(run(preset, alloc, LNMode.CLIPPED_CW.value))

    accuracy = {report.name: report.accuracy for report in quantizer_rows + allocation_rows}
    bits = cfg.base_bits
    checks = {
        "clipped_cw >= channelwise": accuracy[f"clipped_cw-{bits}"] >= accuracy[f"channelwise-{bits}"],
        "channelwise >= layerwise": accuracy[f"channelwise-{bits}"] >= accuracy[f"layerwise-{bits}"],
        "layerwise worst by >= 2 points": all(
            accuracy[f"layerwise-{bits}"] <= accuracy[f"{mode}-{bits}"] - 0.02
            for mode in ("channelwise", "scale_reparam", "clipped_cw")
        ),
        "b12-lrp >= uniform": accuracy["b12-lrp"] >= accuracy["uniform"],
        "b12-lrp within budget": next(r for r in allocation_rows if r.name == "b12-lrp").within_budget,
    }
    report = AblationReport(quantizer_rows, allocation_rows, checks, provenance)
    report.write(paths.reports)
    held = sum(checks.values())
    summary = f"ablation: {len(quantizer_rows) + len(allocation_rows)} rows, {held}/{len(checks)} directional checks hold"
    failed = [name for name, ok in checks.items() if not ok]
    if failed:
        raise AblationCheckError(summary, failed="; ".join(failed), report=str(paths.reports / "ablation.json"))
    return summary
