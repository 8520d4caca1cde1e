"""Private SPV for Bitcoin-shaped chains over PIR databases."""

__version__ = "0.1.0"
