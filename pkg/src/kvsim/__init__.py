"""kvsim - discrete-event simulator for multi-instance LLM inference clusters."""

__version__ = "0.1.0"
