import pytest

from inlinecmr.config import (ChainConfig, ConfigError, parse_chain_config,
                              render_chain_config)

DOCUMENT = """
[chain]
reader = icsp
writer = icsp
gadgets = kspace_buffer, trigger, fft_recon

[gadget.trigger]
trigger_dimension = slice
"""


def test_order_preserved():
    config = parse_chain_config(DOCUMENT)
    assert config.gadget_names() == ["kspace_buffer", "trigger", "fft_recon"]
    assert config.reader_name == "icsp"
    assert config.writer_name == "icsp"


def test_properties_attach_to_named_gadget():
    config = parse_chain_config(DOCUMENT)
    assert config.gadgets[1].properties == {"trigger_dimension": "slice"}
    assert config.gadgets[0].properties == {}


def test_missing_gadgets_key():
    with pytest.raises(ConfigError, match="gadgets"):
        parse_chain_config("[chain]\nreader = icsp\nwriter = icsp\n")


def test_missing_chain_section():
    with pytest.raises(ConfigError, match=r"\[chain\]"):
        parse_chain_config("[gadget.trigger]\ntrigger_dimension = slice\n")


def test_empty_gadget_list():
    with pytest.raises(ConfigError, match="empty"):
        parse_chain_config("[chain]\nreader=a\nwriter=b\ngadgets = \n")


def test_unknown_section_is_error():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_chain_config(DOCUMENT + "\n[mystery]\nk = v\n")


def test_gadget_section_for_unlisted_name_is_error():
    with pytest.raises(ConfigError, match="not in the chain"):
        parse_chain_config(DOCUMENT + "\n[gadget.nope]\nk = v\n")


def test_syntax_error_reports_line_number():
    bad = "[chain]\nreader = a\nwriter = b\ngadgets = g\nnonsense\n"
    with pytest.raises(ConfigError, match="line 5"):
        parse_chain_config(bad)


def test_duplicate_gadget_names_allowed():
    text = "[chain]\nreader=a\nwriter=b\ngadgets = trigger, trigger\n"
    config = parse_chain_config(text)
    assert config.gadget_names() == ["trigger", "trigger"]


def test_render_parse_roundtrip():
    text = render_chain_config(
        "icsp", "icsp",
        [("trigger", {"trigger_dimension": "slice"}), ("fft_recon", {})])
    config = parse_chain_config(text)
    assert isinstance(config, ChainConfig)
    assert config.gadget_names() == ["trigger", "fft_recon"]
    assert config.gadgets[0].properties == {"trigger_dimension": "slice"}
