import socket
from pathlib import Path

import pytest

from bdevstack.blockcore import DeviceKind, Status
from bdevstack.config import (
    ConfigError,
    StartupError,
    build_stack,
    load_config,
    parse_config,
    serialize_config,
)
from bdevstack.export import BlockClient, TargetMode
from bdevstack.raid import PoisonConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _ephemeral(spec):
    for e in spec.exports:
        if e.mode is TargetMode.PROCESSED:
            e.listen = "127.0.0.1:0"
    return spec


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
def test_shipped_configs_parse_and_round_trip(name):
    spec = load_config(CONFIGS / name)
    again = parse_config(serialize_config(spec))
    assert again.devices == spec.devices
    assert again.exports == spec.exports
    assert again.reactor == spec.reactor


def test_raid1_example():
    spec = load_config(CONFIGS / "raid1_null.yaml")
    r0 = spec.device("r0")
    assert r0.kind is DeviceKind.RAID and r0.bases == ["n0", "n1"]
    assert spec.exports[0].device == "r0" and spec.exports[0].mode is TargetMode.PROCESSED
    assert spec.reactor.idle_yield is False


def test_poison_carried_verbatim():
    spec = load_config(CONFIGS / "raid5_poison.yaml")
    assert spec.device("r5").params["poison"] == PoisonConfig(True, 0.001, 7)
    assert spec.device("r5").params["safe_read"] is True


def test_empty_config():
    for text in ("", "devices: []\nexports: []\n", "devices:\nexports:\n"):
        spec = parse_config(text)
        assert spec.devices == [] and spec.exports == []
        with build_stack(spec) as stack:
            assert stack.targets == []


BAD = [
    ("devices:\n  - {id: a, kind: tape, block_size: 1, block_count: 1}\n", 2, "unknown device kind"),
    ("devices:\n  - id: a\n    kind: null\n    block_size: 512\n    block_count: 8\n    colour: red\n",
     6, "unknown field"),
    ("devices:\n  - {id: a, kind: memory, block_size: 512, block_count: 8, path: /x}\n", 2,
     "not valid for kind"),
    ("devices:\n  - {id: a, kind: raid, level: raid1, bases: [a]}\n", 2, "cycle"),
    ("devices:\n  - {id: a, kind: raid, level: raid1, bases: [b]}\n"
     "  - {id: b, kind: raid, level: raid1, bases: [a]}\n", None, "cycle"),
    ("devices:\n  - {id: a, kind: raid, level: raid1, bases: [zz]}\n", 2, "unknown base"),
    ("devices:\n  - {id: a, kind: null, block_size: 512, block_count: 8}\n"
     "  - {id: a, kind: null, block_size: 512, block_count: 8}\n", 3, "duplicate device id"),
    ("devices:\n  - {id: a, kind: null, block_size: 512}\n", 2, "missing field"),
    ("devices:\n  - {id: a, kind: null, block_size: zero, block_count: 1}\n", 2, "expected int"),
    ("devices:\n  - {id: a, kind: raid, level: raid9, bases: [a]}\n", 2, ""),
    ("reactor:\n  poll_budget: 0\n", 2, ">= 1"),
    ("exports:\n  - {listen: '127.0.0.1:1', mode: processed, device: nope}\n", 2, "unknown device"),
    ("exports:\n  - {listen: '127.0.0.1:1', mode: sideways, device: a}\n", 2, "mode"),
    ("exports:\n  - {listen: '127.0.0.1:1', mode: passthrough}\n", 2, "upstream"),
    ("devices: [\n", None, "invalid YAML"),
    ("surprise: 1\n", 1, "unknown field"),
]


@pytest.mark.parametrize("text,line,needle", BAD)
def test_config_errors(text, line, needle):
    with pytest.raises(ConfigError) as ei:
        parse_config(text)
    assert needle in str(ei.value)
    if line is not None:
        assert ei.value.line == line and f"line {line}" in str(ei.value)


def test_base_must_precede_dependent():
    text = ("devices:\n  - {id: r, kind: raid, level: raid1, bases: [a, b]}\n"
            "  - {id: a, kind: null, block_size: 512, block_count: 8}\n"
            "  - {id: b, kind: null, block_size: 512, block_count: 8}\n")
    with pytest.raises(ConfigError, match="declared before"):
        parse_config(text)


def test_geometry_mismatch_is_config_error():
    text = ("devices:\n  - {id: a, kind: null, block_size: 512, block_count: 8}\n"
            "  - {id: b, kind: null, block_size: 4096, block_count: 8}\n"
            "  - {id: r, kind: raid, level: raid1, bases: [a, b]}\n")
    with pytest.raises(ConfigError) as ei:
        build_stack(parse_config(text))
    assert ei.value.line == 4


def test_build_stack_serves_info():
    spec = _ephemeral(load_config(CONFIGS / "raid1_null.yaml"))
    with build_stack(spec) as stack:
        with BlockClient(stack.endpoint()) as c:
            g = c.info()
            assert (g.block_size, g.block_count) == (4096, 1048576)
            assert c.read(0, 4096).payload == bytes(4096)


def test_relay_config_end_to_end():
    spec = load_config(CONFIGS / "compress_relay.yaml")
    spec.exports[0].listen = "127.0.0.1:0"
    spec.exports.pop()
    with build_stack(spec) as stack:
        direct = stack.endpoint()
        relay_spec = parse_config(
            f"exports:\n  - {{listen: '127.0.0.1:0', mode: passthrough, upstream: '{direct}'}}\n")
        with build_stack(relay_spec) as relay, BlockClient(relay.endpoint()) as c:
            data = b"compressible " * 315 + b"x"
            assert c.write(0, data[:4096]).status is Status.OK
            assert c.read(0, 4096).payload == data[:4096]


def test_duplicate_export_is_startup_error():
    text = ("devices:\n  - {id: a, kind: null, block_size: 512, block_count: 8}\n"
            "exports:\n  - {listen: '127.0.0.1:9555', mode: processed, device: a}\n"
            "  - {listen: '127.0.0.1:9555', mode: processed, device: a}\n")
    with pytest.raises(StartupError, match="duplicate export"):
        build_stack(parse_config(text))


def test_port_in_use_is_startup_error():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    s.listen()
    port = s.getsockname()[1]
    try:
        text = ("devices:\n  - {id: a, kind: null, block_size: 512, block_count: 8}\n"
                f"exports:\n  - {{listen: '127.0.0.1:{port}', mode: processed, device: a}}\n")
        with pytest.raises(StartupError):
            build_stack(parse_config(text))
    finally:
        s.close()


def test_missing_file_backing_is_startup_error(tmp_path):
    text = ("devices:\n  - {id: f, kind: file, block_size: 512, block_count: 8, "
            f"path: '{tmp_path}/no/such/dir/f.img'}}\n")
    with pytest.raises(StartupError):
        build_stack(parse_config(text))
