# SPDX-FileCopyrightText: 2024-present Caleb Trevatt <caleb@users.noreply.github.com>
#
# SPDX-License-Identifier: MIT
__version__ = "0.1.0"
