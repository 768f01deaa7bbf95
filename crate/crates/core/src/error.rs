// SPDX-License-Identifier: Apache-2.0

/// Stable, machine-readable error code. These strings are part of the
/// REST contract (`{"error":{"code":..}}`) and must not change.
pub trait ErrorCode {
    fn code(&self) -> &'static str;
}
