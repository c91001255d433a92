"""Federated single sign-on and zero-trust access control plane, desk scale.

Identity brokering across simulated providers, authorization-led
registration, short-lived audience-scoped tokens, an SSH certificate
authority, a bastion/tunnel gateway with kill switches, a security centre,
and a harness that replays the user stories over the zone topology.
"""

__version__ = "0.1.0"
