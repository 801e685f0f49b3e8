import math

from rest_framework import serializers

from .bit_allocator import AllocationMode
from .crl import LNMode
from .datasets import CLASS_NAMES
from .lrp import TARGETS


class ViTConfigSerializer(serializers.Serializer):
    image_size = serializers.IntegerField(min_value=1, default=32)
    patch_size = serializers.IntegerField(min_value=1, default=8)
    channels = serializers.IntegerField(min_value=1, default=3)
    embed_dim = serializers.IntegerField(min_value=1, default=64)
    heads = serializers.IntegerField(min_value=1, default=4)
    blocks = serializers.IntegerField(min_value=1, default=4)
    mlp_ratio = serializers.FloatField(min_value=0.0, default=4.0)
    classes = serializers.IntegerField(min_value=2, default=3)
    ln_eps = serializers.FloatField(min_value=0.0, default=1e-6)

    def validate_mlp_ratio(self, value):
        if value <= 0:
            raise serializers.ValidationError("mlp_ratio must be positive.")
        return value

    def validate(self, attrs):
        if attrs["embed_dim"] % attrs["heads"]:
            raise serializers.ValidationError({"heads": "embed_dim must be divisible by heads."})
        if attrs["image_size"] % attrs["patch_size"]:
            raise serializers.ValidationError({"patch_size": "image_size must be divisible by patch_size."})
        return attrs


class RunConfigSerializer(serializers.Serializer):
    vit = ViTConfigSerializer()
    seed = serializers.IntegerField(min_value=0, max_value=2**64 - 1)
    base_bits = serializers.IntegerField(min_value=2, max_value=32)
    mode = serializers.ChoiceField(choices=[mode.value for mode in AllocationMode])
    ln_mode = serializers.ChoiceField(choices=[mode.value for mode in LNMode], default=LNMode.CLIPPED_CW.value)
    n_sigma = serializers.FloatField()
    percentile = serializers.FloatField(max_value=100.0)
    calib_size = serializers.IntegerField(min_value=1)
    importance_samples = serializers.IntegerField(min_value=1)
    target = serializers.ChoiceField(choices=list(TARGETS), default="label")
    boost_blocks = serializers.IntegerField(min_value=1, default=2)
    demote_per_block = serializers.IntegerField(min_value=1, max_value=7, default=2)
    demote_depth = serializers.IntegerField(min_value=1, default=1)
    train_per_class = serializers.IntegerField(min_value=1, default=100)
    eval_per_class = serializers.IntegerField(min_value=1, default=200)
    epochs = serializers.IntegerField(min_value=0, default=30)
    lr = serializers.FloatField(default=0.05)
    batch_size = serializers.IntegerField(min_value=1, default=32)
    ln_outliers = serializers.IntegerField(min_value=0, default=2)
    outlier_gain = serializers.FloatField(min_value=1.0, default=1024.0)
    run_dir = serializers.CharField()

    def validate_n_sigma(self, value):
        if not value > 0:
            raise serializers.ValidationError("n_sigma must be positive.")
        return value

    def validate_percentile(self, value):
        if not value > 0:
            raise serializers.ValidationError("percentile must lie in (0, 100].")
        return value

    def validate_lr(self, value):
        if not value > 0:
            raise serializers.ValidationError("learning rate must be positive.")
        return value

    def validate_outlier_gain(self, value):
        if math.frexp(value)[0] != 0.5:
            raise serializers.ValidationError("outlier_gain must be a power of two.")
        return value

    def validate(self, attrs):
        if attrs["mode"] != AllocationMode.UNIFORM.value:
            if attrs["base_bits"] - attrs["demote_depth"] < 2:
                raise serializers.ValidationError(
                    {"base_bits": "mixed modes need base_bits - demote_depth >= 2."}
                )
            if attrs["boost_blocks"] >= attrs["vit"]["blocks"]:
                raise serializers.ValidationError(
                    {"boost_blocks": "mixed modes need more blocks than boosted blocks."}
                )
        if attrs["ln_outliers"] > attrs["vit"]["embed_dim"]:
            raise serializers.ValidationError({"ln_outliers": "cannot exceed embed_dim."})
        if attrs["calib_size"] > attrs["train_per_class"] * attrs["vit"]["classes"]:
            raise serializers.ValidationError({"calib_size": "calibration set exceeds the training set."})
        if attrs["importance_samples"] > attrs["train_per_class"] * attrs["vit"]["classes"]:
            raise serializers.ValidationError(
                {"importance_samples": "more importance samples than training images."}
            )
        if attrs["vit"]["classes"] > len(CLASS_NAMES) or attrs["vit"]["channels"] != 3:
            raise serializers.ValidationError(
                {"vit": f"the toy dataset provides {len(CLASS_NAMES)} RGB classes at most."}
            )
        return attrs
