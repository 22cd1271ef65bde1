// Copyright (C) 2026 The roundattn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace roundattn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad user input: malformed documents, invalid configuration, domain violations.
class InputError : public Error {
public:
    using Error::Error;
};

class ParseError : public InputError {
public:
    ParseError(std::size_t message_index, const std::string& what)
        : InputError("message " + std::to_string(message_index) + ": " + what),
          m_message_index(message_index) {}

    std::size_t message_index() const noexcept { return m_message_index; }

private:
    std::size_t m_message_index;
};

class StructureError : public InputError {
public:
    using InputError::InputError;
};

/// Attention trace header/payload disagreement or a violated score invariant.
class TraceError : public InputError {
public:
    using InputError::InputError;
};

class ConfigError : public InputError {
public:
    using InputError::InputError;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class CapacityError : public Error {
public:
    CapacityError(unsigned long long required, unsigned long long available)
        : Error("device capacity exceeded: required " + std::to_string(required) + " bytes, available " +
                std::to_string(available) + " bytes"),
          m_required(required),
          m_available(available) {}

    unsigned long long required() const noexcept { return m_required; }
    unsigned long long available() const noexcept { return m_available; }

private:
    unsigned long long m_required;
    unsigned long long m_available;
};

/// A request that contradicts the current store or pipeline state.
class ConsistencyError : public Error {
public:
    using Error::Error;
};

/// An internal invariant was found broken at runtime.
class InvariantError : public Error {
public:
    using Error::Error;
};

}  // namespace roundattn
