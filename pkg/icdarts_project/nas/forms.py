"""Validation of command-line options before they become run configurations."""
from typing import Any, Dict, Mapping

from django import forms

from nas.services.ablations import TEMPLATE_ABLATIONS
from nas.services.datasets import DATASET_NAMES
from nas.services.discretizer import DISCRETIZERS, ZERO_CONFIGS
from nas.services.operations import SPACES
from nas.services.search import LOSS_PRESETS, ROUTES


def _choices(values) -> list:
    return [(v, v) for v in values]


class SearchForm(forms.Form):
    seed = forms.IntegerField(required=False, min_value=0)
    dataset = forms.ChoiceField(required=False, choices=_choices(DATASET_NAMES))
    space = forms.ChoiceField(required=False, choices=_choices(SPACES))
    zero_config = forms.CharField(required=False, max_length=2)
    discretizer = forms.ChoiceField(required=False, choices=_choices(DISCRETIZERS))
    loss = forms.ChoiceField(required=False, choices=_choices(LOSS_PRESETS))
    route = forms.CharField(required=False, max_length=1)
    stage = forms.IntegerField(required=False, min_value=0, max_value=3)
    cells = forms.IntegerField(required=False, min_value=3)
    epochs = forms.IntegerField(required=False, min_value=1, help_text="Search steps S_S.")

    def clean_zero_config(self) -> str:
        value = (self.cleaned_data["zero_config"] or "").strip().upper()
        if value and value not in ZERO_CONFIGS:
            raise forms.ValidationError(f"Zero config must be one of {', '.join(ZERO_CONFIGS)}.")
        return value

    def clean_route(self) -> str:
        value = (self.cleaned_data["route"] or "").strip().upper()
        if value and value not in ROUTES:
            raise forms.ValidationError(f"Route must be one of {', '.join(ROUTES)}.")
        return value

    def clean(self) -> Dict[str, Any]:
        cleaned = super().clean()
        route, stage = cleaned.get("route"), cleaned.get("stage")
        if bool(route) != (stage is not None):
            raise forms.ValidationError("--route and --stage must be given together.")
        if route and cleaned.get("loss"):
            raise forms.ValidationError("--loss cannot be combined with --route.")
        return cleaned

    def search_overrides(self) -> Dict[str, Any]:
        """Overrides in ``SearchConfig.to_dict`` layout; missing options stay ``None``."""
        data = self.cleaned_data
        return {
            "seed": data.get("seed"),
            "dataset": data.get("dataset") or None,
            "space_id": data.get("space") or None,
            "zero_config": data.get("zero_config") or None,
            "discretizer": data.get("discretizer") or None,
            "loss": data.get("loss") or None,
            "search_steps": data.get("epochs"),
            "template": {"n_cells_search": data.get("cells")},
        }


class RetrainForm(forms.Form):
    seed = forms.IntegerField(required=False, min_value=0)
    epochs = forms.IntegerField(required=False, min_value=0)
    cells = forms.IntegerField(required=False, min_value=3)
    batch_size = forms.IntegerField(required=False, min_value=1)
    cutout = forms.IntegerField(required=False, min_value=0)
    drop_path = forms.FloatField(required=False, min_value=0.0)

    def clean_drop_path(self):
        value = self.cleaned_data["drop_path"]
        if value is not None and value >= 1.0:
            raise forms.ValidationError("Drop-path probability must be below 1.")
        return value

    def schedule_overrides(self) -> Dict[str, Any]:
        data = self.cleaned_data
        return {key: data.get(key) for key in ("seed", "epochs", "batch_size", "cutout", "drop_path")}


class TournamentForm(forms.Form):
    tiers = forms.IntegerField(required=False, min_value=1, max_value=8)
    o_max = forms.IntegerField(required=False, min_value=1)
    run_budget = forms.IntegerField(required=False, min_value=0)
    tier_epochs = forms.IntegerField(required=False, min_value=1)
    master_space = forms.ChoiceField(required=False, choices=_choices(SPACES))

    def clean_o_max(self):
        value = self.cleaned_data["o_max"]
        space = self.data.get("master_space") or "combined"
        if value is not None and space in SPACES and value > len(SPACES[space]):
            raise forms.ValidationError(f"o_max exceeds the {len(SPACES[space])} ops of space {space}.")
        return value

    def tournament_overrides(self) -> Dict[str, Any]:
        data = self.cleaned_data
        overrides = {key: data.get(key) or None for key in ("tiers", "o_max", "tier_epochs", "master_space")}
        overrides["run_budget"] = data.get("run_budget")
        return overrides


class AblationForm(forms.Form):
    template = forms.ChoiceField(required=False, choices=_choices(TEMPLATE_ABLATIONS))
    route = forms.ChoiceField(required=False, choices=_choices(ROUTES))
    stage = forms.IntegerField(required=False, min_value=0, max_value=3)
    literal = forms.BooleanField(required=False, help_text="Run the routeA3_literal preset.")

    def clean(self) -> Dict[str, Any]:
        cleaned = super().clean()
        route, stage = cleaned.get("route"), cleaned.get("stage")
        if bool(route) != (stage is not None):
            raise forms.ValidationError("--route and --stage must be given together.")
        modes = [bool(cleaned.get("template")), bool(route), bool(cleaned.get("literal"))]
        if sum(modes) != 1:
            raise forms.ValidationError("Give exactly one of --template, --route with --stage, or --literal.")
        return cleaned


def form_data(options: Mapping[str, Any], names) -> Dict[str, Any]:
    """Bound-form data holding only the options that were given."""
    return {name: options[name] for name in names if options.get(name) is not None and options.get(name) is not False}
