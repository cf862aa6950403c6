"""Named experiment geometries for the seven standard scenarios.

Canonical class labels: normal_a, cnv_a, drusen_a, dme_a for the primary
dataset; normal_b, amd_b for the second-population dataset; normal_t,
cnv_t, drusen_t, dme_t for the independent test set used by the fixed
single-round scenario. Templates accept any manifest that declares the
labels they reference.

Quarter frames (before rotation): two quarters train, one validates, and
the test frame holds the remaining quarter of every primary-dataset class,
including classes never seen in training. The fixed scenario instead
trains on three quarters of every primary class, validates on the fourth,
and tests the whole independent set.
"""

from __future__ import annotations

from .dataset import QUARTERS, ReferenceGroupSpec, ScenarioSpec

ALPHA_CLASSES = ("normal_a", "cnv_a", "drusen_a", "dme_a")
BETA_CLASSES = ("normal_b", "amd_b")
HOLDOUT_CLASSES = ("normal_t", "cnv_t", "drusen_t", "dme_t")

DEFAULT_REFERENCE_SIZE = 5000

Q12 = frozenset({1, 2})
Q3 = frozenset({3})
Q4 = frozenset({4})
Q123 = frozenset({1, 2, 3})
QALL = frozenset(QUARTERS)


def _alpha_test() -> tuple[tuple[str, frozenset[int]], ...]:
    return tuple((label, Q4) for label in ALPHA_CLASSES)


def _pair_template(name: str, disease: str, ref_size: int) -> ScenarioSpec:
    return ScenarioSpec(
        name=name,
        train=(("normal_a", Q12), (disease, Q12)),
        validation=(("normal_a", Q3), (disease, Q3)),
        test=_alpha_test(),
        reference_groups=(ReferenceGroupSpec("normal_a", "normal_a", ref_size),),
        rotation="fourfold",
    )


def make_template(name: str, reference_size: int = DEFAULT_REFERENCE_SIZE) -> ScenarioSpec:
    """Resolve a template name to its scenario spec."""
    if name in ("fig1_cnv", "fig1_drusen", "fig1_dme"):
        disease = {"fig1_cnv": "cnv_a", "fig1_drusen": "drusen_a", "fig1_dme": "dme_a"}[name]
        return _pair_template(name, disease, reference_size)
    if name == "fig2":
        return ScenarioSpec(
            name="fig2",
            train=(("normal_a", Q12), ("normal_b", Q12), ("amd_b", Q12)),
            validation=(("normal_a", Q3), ("normal_b", Q3), ("amd_b", Q3)),
            test=_alpha_test(),
            reference_groups=(
                ReferenceGroupSpec("normal_a", "normal_a", reference_size),
                ReferenceGroupSpec("normal_b", "normal_b", reference_size),
            ),
            rotation="fourfold",
        )
    if name == "fig3":
        return ScenarioSpec(
            name="fig3",
            train=(("normal_b", Q12), ("amd_b", Q12)),
            validation=(("normal_b", Q3), ("amd_b", Q3)),
            test=_alpha_test(),
            reference_groups=(ReferenceGroupSpec("normal_b", "normal_b", reference_size),),
            rotation="fourfold",
        )
    if name == "fig4":
        return ScenarioSpec(
            name="fig4",
            train=(("normal_a", Q12), ("normal_b", Q12)),
            validation=(("normal_a", Q3), ("normal_b", Q3)),
            test=_alpha_test(),
            reference_groups=(
                ReferenceGroupSpec("normal_a", "normal_a", reference_size),
                ReferenceGroupSpec("normal_b", "normal_b", reference_size),
            ),
            rotation="fourfold",
        )
    if name == "supp1":
        return ScenarioSpec(
            name="supp1",
            train=tuple((label, Q123) for label in ALPHA_CLASSES),
            validation=tuple((label, Q4) for label in ALPHA_CLASSES),
            test=tuple((label, QALL) for label in HOLDOUT_CLASSES),
            reference_groups=(ReferenceGroupSpec("normal_a", "normal_a", reference_size),),
            rotation="fixed",
        )
    raise KeyError(f"unknown template {name!r}; known: {sorted(TEMPLATE_NAMES)}")


TEMPLATE_NAMES = frozenset(
    {"fig1_cnv", "fig1_drusen", "fig1_dme", "fig2", "fig3", "fig4", "supp1"}
)
