"""
qclock - Few-qubit atomic clock protocols

Simulates an oscillator with flicker-frequency noise that is steered by
projective measurements of N entangled qubits, estimates the long-term clock
instability by Monte Carlo, and searches the protocol space for the most
stable clock.
"""

__version__ = "0.1.0"
__app_name__ = "qclock"
