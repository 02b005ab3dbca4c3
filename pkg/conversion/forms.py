from django import forms

from .exceptions import ConfigError
from .models import TrainingRun


class ModelConfigForm(forms.Form):
    mel_dim = forms.IntegerField(min_value=1)
    bnf_dim = forms.IntegerField(min_value=1)
    pitch_dim = forms.IntegerField(min_value=1)
    xvec_dim = forms.IntegerField(min_value=1)
    model_dim = forms.IntegerField(min_value=1)
    prenet_channels = forms.IntegerField(min_value=1)
    n_tcr_blocks = forms.IntegerField(min_value=1)
    gamma_t = forms.IntegerField(min_value=1)
    gamma_c = forms.IntegerField(min_value=1)
    gamma_tr = forms.JSONField()
    frame_shift_ms = forms.FloatField()
    pitch_downsample = forms.IntegerField(min_value=1)
    content_layers = forms.IntegerField(min_value=1)
    content_heads = forms.IntegerField(min_value=1)
    smoother_layers = forms.IntegerField(min_value=1)
    style_dim = forms.IntegerField(min_value=1)
    content_model_dim = forms.IntegerField(min_value=1)
    lambda_mel = forms.FloatField(min_value=0.0)
    lambda_sty = forms.FloatField(min_value=0.0)
    lambda_con = forms.FloatField(min_value=0.0)
    lambda_spk = forms.FloatField(min_value=0.0)
    lr = forms.FloatField()
    lr_decay = forms.FloatField()
    lr_decay_steps = forms.IntegerField(min_value=1)
    batch_size = forms.IntegerField(min_value=1)
    checkpoint_every = forms.IntegerField(min_value=1)
    precision = forms.ChoiceField(choices=[("float32", "float32"), ("float64", "float64")])
    uniform_temporal_attn = forms.JSONField(required=False)
    uniform_channel_attn = forms.JSONField(required=False)
    active_blocks = forms.IntegerField(required=False)
    disable_cycle = forms.BooleanField(required=False)
    disable_style_loss = forms.BooleanField(required=False)
    disable_content_loss = forms.BooleanField(required=False)
    disable_speaker_loss = forms.BooleanField(required=False)
    speaker_module = forms.ChoiceField(
        choices=[("tcr", "tcr"), ("sv", "sv"), ("conv", "conv")]
    )
    paired_reference = forms.ChoiceField(
        choices=[("self", "self"), ("same_speaker", "same_speaker")]
    )
    seed = forms.IntegerField(min_value=0)
    frozen_seed = forms.IntegerField(min_value=0)

    @classmethod
    def data_from_config(cls, cfg) -> dict:
        data = cfg.to_dict()
        data.update(data.pop("loss_weights"))
        data.update(data.pop("ablation"))
        return data

    def clean(self):
        cleaned = super().clean()
        n_blocks = cleaned.get("n_tcr_blocks")
        gamma_c = cleaned.get("gamma_c")
        channels = cleaned.get("prenet_channels")

        gamma_tr = cleaned.get("gamma_tr")
        if gamma_tr is not None:
            if not isinstance(gamma_tr, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in gamma_tr
            ):
                self.add_error("gamma_tr", "every gamma_tr entry must be an integer >= 1")
            elif n_blocks and len(gamma_tr) != n_blocks:
                self.add_error(
                    "gamma_tr",
                    f"gamma_tr has {len(gamma_tr)} entries but n_tcr_blocks={n_blocks}",
                )

        if n_blocks and gamma_c and channels:
            divisor = gamma_c**n_blocks
            if channels % divisor:
                self.add_error(
                    "prenet_channels",
                    f"prenet_channels={channels} not divisible by {divisor} "
                    f"(gamma_c^n_tcr_blocks)",
                )

        active = cleaned.get("active_blocks")
        if active is not None and n_blocks and not 1 <= active <= n_blocks:
            self.add_error(
                "active_blocks", f"active_blocks={active} outside 1..{n_blocks}"
            )

        for name in ("uniform_temporal_attn", "uniform_channel_attn"):
            flags = cleaned.get(name)
            if flags is None:
                continue
            if not isinstance(flags, list) or not all(isinstance(v, bool) for v in flags):
                self.add_error(name, f"{name} must be a list of booleans")
            elif n_blocks and len(flags) != n_blocks:
                self.add_error(
                    name, f"{name} has {len(flags)} entries but n_tcr_blocks={n_blocks}"
                )

        model_dim = cleaned.get("model_dim")
        heads = cleaned.get("content_heads")
        if model_dim and heads and model_dim % heads:
            self.add_error(
                "content_heads", f"model_dim={model_dim} not divisible by {heads} heads"
            )

        if cleaned.get("lr") is not None and cleaned["lr"] <= 0:
            self.add_error("lr", "lr must be positive")
        decay = cleaned.get("lr_decay")
        if decay is not None and not 0 < decay <= 1:
            self.add_error("lr_decay", "lr_decay must lie in (0, 1]")
        if cleaned.get("frame_shift_ms") is not None and cleaned["frame_shift_ms"] <= 0:
            self.add_error("frame_shift_ms", "frame_shift_ms must be positive")

        if cleaned.get("paired_reference") == "same_speaker" and not cleaned.get("disable_cycle"):
            self.add_error(
                "paired_reference",
                "paired_reference=same_speaker draws same-speaker partners; set disable_cycle",
            )
        return cleaned


class TrainingRunForm(forms.ModelForm):
    config = forms.JSONField(
        initial=dict,
        required=False,
        help_text="ModelConfig overrides as JSON; omitted keys take defaults.",
        widget=forms.Textarea(attrs={"rows": 8}),
    )

    class Meta:
        model = TrainingRun
        fields = ["name", "data_dir", "config", "max_steps", "epochs"]

    def clean_config(self):
        from .core import ModelConfig, validate_config

        value = self.cleaned_data["config"] or {}
        if not isinstance(value, dict):
            raise forms.ValidationError("Config must be a JSON object.")
        try:
            cfg = validate_config(ModelConfig.from_dict(value))
        except (ConfigError, TypeError) as exc:
            errors = getattr(exc, "errors", [str(exc)])
            raise forms.ValidationError(errors)
        return cfg.to_dict()

    def clean(self):
        cleaned = super().clean()
        if not cleaned.get("max_steps") and not cleaned.get("epochs"):
            raise forms.ValidationError("Set max steps, epochs, or both.")
        return cleaned
