"""Federated learning with server-side backdoor-watermark sanitization.

Clients embed backdoor-style watermarks into their local updates; the server
unlearns, locates and extracts the responsible subnetwork, recovers each
client's trigger across rounds, prunes the backdoor units before aggregation,
and finally re-binds every recovered trigger to a harmless per-client
verification environment.
"""

__version__ = "0.1.0"
