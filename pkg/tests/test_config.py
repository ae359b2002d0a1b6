import pytest
from hypothesis import given, settings, strategies as st

from snpns.config import SCHEMA, load_config, parse_config
from snpns.errors import ConfigError

BASE = """\
domain = torus
grid.nx = 16
species.D = 1.0, 1.0
species.z = 1, -1
time.dt = 0.01
time.T = 0.1
"""


def test_defaults_filled():
    cfg = parse_config(BASE)
    assert cfg["grid.ny"] == 16
    assert cfg["species.bc"] == ["periodic", "periodic"]
    assert cfg.experiment == "simulate" and cfg.seed == 0
    assert set(cfg.values) == set(SCHEMA)


def test_comments_and_blank_lines():
    cfg = parse_config("# header\n\n" + BASE + "run.seed = 9  # trailing\n")
    assert cfg.seed == 9


def test_square_defaults_to_blocking():
    cfg = parse_config(BASE.replace("torus", "square"))
    assert cfg["species.bc"] == ["blocking", "blocking"]


@pytest.mark.parametrize("extra, line", [
    ("grid.nz = 4", 7),
    ("grid.nx = 32", 7),
    ("time.dt = fast", 7),
    ("nonsense", 7),
    ("species.bc = dirichlet, periodic", 7),
])
def test_errors_carry_line_numbers(extra, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(BASE + extra + "\n")
    assert exc.value.line is not None
    assert f"line {exc.value.line}" in str(exc.value)
    if extra.startswith(("grid.nz", "grid.nx", "time.dt", "nonsense")):
        assert exc.value.line == line


def test_duplicate_key_mentions_first_line():
    with pytest.raises(ConfigError, match="first set on line 2"):
        parse_config(BASE + "grid.nx = 8\n")


@pytest.mark.parametrize("bad", [
    "species.z = 1, -1, 2",
    "species.D = -1, 1",
    "time.record_every = 0",
    "grid.ny = 8\ndomain_extra = 1",
    "species.means = 1, -2",
    "species.means = 1, 2, 3",
    "initial.kind = two_species\nspecies.D = 1, 2",
])
def test_inconsistent_configs_rejected(bad):
    text = "\n".join(ln for ln in BASE.splitlines()
                     if not any(ln.startswith(b.split("=")[0].strip()) for b in bad.splitlines()))
    with pytest.raises(ConfigError):
        parse_config(text + "\n" + bad + "\n")


def test_neutrality_infeasible_before_compute():
    # all positive valences cannot be neutral on the torus
    with pytest.raises(ConfigError, match="line"):
        parse_config(BASE.replace("species.z = 1, -1", "species.z = 1, 2"))


def test_round_trip_and_digest():
    cfg = parse_config(BASE + "forcing.preset = single_mode(1.0, 2.0)\nrun.out = somewhere\n")
    again = parse_config(cfg.to_text())
    assert again.to_text() == cfg.to_text()
    assert again.digest() == cfg.digest()


def test_location_keys_do_not_change_digest():
    a = parse_config(BASE + "run.out = a\nrun.threads = 1\n")
    b = parse_config(BASE + "run.out = b\nrun.threads = 4\n")
    c = parse_config(BASE + "run.seed = 1\n")
    assert a.digest() == b.digest() != c.digest()
    assert "run.out" in a.to_text(full=True) and "run.out" not in a.to_text()


def test_overrides():
    cfg = parse_config(BASE).with_overrides(run__seed=5)
    assert cfg.seed == 5
    with pytest.raises(ConfigError):
        parse_config(BASE).with_overrides(run__bogus=1)


def test_builds_model_and_state(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(BASE + "noise.modes = 4\nnoise.amplitude = 0.1\n")
    cfg = load_config(p)
    m = cfg.build_model()
    assert m.n_species == 2 and m.noise.count == 4
    s = cfg.initial_state(m)
    assert s.c.shape == (2, 16, 16)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([8, 12, 16, 30, 48, 64, 90]), st.integers(0, 1000),
       st.floats(1e-4, 1.0, allow_nan=False), st.sampled_from(["none", "taylor_green", "bump"]))
def test_text_round_trip_property(n, seed, dt, preset):
    text = BASE.replace("grid.nx = 16", f"grid.nx = {n}").replace("time.dt = 0.01", f"time.dt = {dt!r}")
    cfg = parse_config(text + f"run.seed = {seed}\nforcing.preset = {preset}\n")
    assert parse_config(cfg.to_text()).values == cfg.values
