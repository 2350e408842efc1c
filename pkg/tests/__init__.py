"""Tests package for qclock."""
