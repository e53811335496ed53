#pragma once

#include <stdexcept>
#include <string>

namespace t1lab {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArchitecture : public Error {
public:
    using Error::Error;
};

class InvalidToken : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace t1lab
