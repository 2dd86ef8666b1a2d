"""User-space layered block storage stack.

Devices (``backstores``, ``raid``, ``compress``) are driven by a polled
``engine`` and can be exported over the network (``export``, ``wire``);
``bench`` measures them and ``config`` / ``cli`` assemble whole stacks.
"""

from .blockcore import (
    DeviceGeometry,
    DeviceHandle,
    DeviceKind,
    DeviceSpec,
    IOCompletion,
    IORequest,
    Op,
    Registry,
    Status,
)
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "DeviceGeometry",
    "DeviceHandle",
    "DeviceKind",
    "DeviceSpec",
    "IOCompletion",
    "IORequest",
    "KERNEL_BACKEND",
    "Op",
    "Registry",
    "Status",
]
