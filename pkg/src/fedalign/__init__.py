"""Federated learning simulator with AlignIns and baseline robust aggregators."""

__version__ = "0.1.0"
