"""fog: run parts of a pub/sub robot application on simulated cloud instances.

A launch manifest names nodes and where they run; everything else --
provisioning, code push, secure networking, topic bridging, and network
monitoring -- happens on `fog launch`.
"""

__version__ = "0.1.0"
