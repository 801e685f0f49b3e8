from django.apps import AppConfig


class VitQuantConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "vit_quant"
    verbose_name = "ViT mixed-precision PTQ"
