# SPDX-FileCopyrightText: 2024-present Caleb Trevatt <caleb@users.noreply.github.com>
#
# SPDX-License-Identifier: MIT
from spikinghan.__about__ import __version__

__all__ = ["__version__"]
