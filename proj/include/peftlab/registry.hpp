// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "peftlab/tensor.hpp"

namespace peftlab {

/// Uniquely named parameters in insertion order, each with a frozen flag and
/// a weight-decay flag.
template <class T>
class ParamRegistry {
public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        bool frozen = false;
        bool decay = true;
    };

    void add(std::string name, Tensor<T> value, bool decay = true) {
        if (index_.contains(name)) {
            throw state_error("duplicate parameter name '" + name + "'");
        }
        index_.emplace(name, entries_.size());
        entries_.push_back({std::move(name), std::move(value), false, decay});
    }

    bool contains(const std::string& name) const { return index_.contains(name); }

    Entry& entry(const std::string& name) { return entries_[position(name)]; }
    const Entry& entry(const std::string& name) const { return entries_[position(name)]; }

    Tensor<T> get(const std::string& name) const { return entry(name).value; }

    /// Handle to `name`, or an empty tensor when absent.
    Tensor<T> find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? Tensor<T>() : entries_[it->second].value;
    }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& e : entries_) {
            n += e.value.size();
        }
        return n;
    }

    /// Deep copy: tensors are cloned, flags preserved.
    ParamRegistry clone() const {
        ParamRegistry out;
        for (const auto& e : entries_) {
            out.add(e.name, e.value.clone(), e.decay);
            out.entries_.back().frozen = e.frozen;
        }
        return out;
    }

private:
    std::size_t position(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw schema_error("unknown parameter '" + name + "'");
        }
        return it->second;
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace peftlab
