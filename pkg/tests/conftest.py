"""Shared fixture bundle, built once and cached on disk across sessions."""

import json
from pathlib import Path

import pytest

from ddis.fixtures import FixtureBundle, build_fixture_bundle, generate_dataset
from ddis.nets import IdentityCodec
from ddis.persistence import CheckpointContainer, format_manifest, load_model, parse_manifest, save_model

CACHE_DIR = Path(__file__).parent / "_cache"

BUILD_PARAMS = dict(
    master_seed=0,
    n_per_class=200,
    heldout_per_class=60,
    domain="filled",
    classifier_epochs=6,
    denoiser_epochs=60,
    codec_epochs=20,
    t_sample=30,
    cfg_scale=15.0,
)


def _cache_path() -> Path:
    tag = "-".join(f"{k}{v}" for k, v in sorted(BUILD_PARAMS.items()))
    return CACHE_DIR / f"bundle-{abs(hash(tag)) % 10**10}.ddis"


def _save_bundle(bundle: FixtureBundle, path: Path) -> None:
    container = CheckpointContainer()
    save_model(container, "classifier", bundle.classifier)
    save_model(container, "denoiser", bundle.denoiser)
    save_model(container, "codec", bundle.codec_learned)
    container.add_text("manifest", "manifest", format_manifest(bundle.manifest))
    container.add_text("build_params", "manifest", json.dumps(BUILD_PARAMS))
    path.parent.mkdir(parents=True, exist_ok=True)
    container.save(path)


def _load_bundle(path: Path) -> FixtureBundle:
    from ddis.diffusion import make_schedule

    container = CheckpointContainer.load(path)
    params = json.loads(container.text("build_params"))
    train_set = generate_dataset(params["domain"], params["n_per_class"], params["master_seed"])
    heldout = generate_dataset(params["domain"], params["heldout_per_class"], params["master_seed"] + 1)
    other_domain = "outline" if params["domain"] == "filled" else "filled"
    other = generate_dataset(other_domain, params["heldout_per_class"], params["master_seed"] + 2)
    manifest_raw = parse_manifest(container.text("manifest"))
    manifest = {}
    for key, value in manifest_raw.items():
        try:
            manifest[key] = float(value) if ("." in value or "e" in value or "E" in value) else int(value)
        except ValueError:
            manifest[key] = value
    return FixtureBundle(
        train_set=train_set,
        heldout_set=heldout,
        other_domain_set=other,
        classifier=load_model(container, "classifier"),
        denoiser=load_model(container, "denoiser"),
        codec_identity=IdentityCodec(train_set.images.shape[1:]),
        codec_learned=load_model(container, "codec"),
        schedule=make_schedule(
            t_sample=params["t_sample"], cfg_scale=params["cfg_scale"], x0_clip=(-1.0, 1.0)
        ),
        manifest=manifest,
    )


@pytest.fixture(scope="session")
def bundle() -> FixtureBundle:
    path = _cache_path()
    if path.exists():
        return _load_bundle(path)
    built = build_fixture_bundle(**BUILD_PARAMS)
    _save_bundle(built, path)
    return _load_bundle(path)  # round-trip so tests see the canonical f64 weights
