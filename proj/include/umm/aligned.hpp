// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdlib>
#include <new>
#include <vector>

namespace umm {

/// 64-byte aligned allocator. Eigen's SIMD kernels peel loop heads based on
/// pointer alignment, so numeric buffers must share one alignment class or
/// results depend on heap layout and runs stop being bit-reproducible.
template <typename T, size_t Alignment = 64>
struct AlignedAllocator {
    using value_type = T;
    template <typename U>
    struct rebind {
        using other = AlignedAllocator<U, Alignment>;
    };

    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U, Alignment>&) noexcept {}

    T* allocate(size_t n) {
        const size_t bytes = (n * sizeof(T) + Alignment - 1) / Alignment * Alignment;
        void* p = std::aligned_alloc(Alignment, bytes);
        if (p == nullptr) {
            throw std::bad_alloc();
        }
        return static_cast<T*>(p);
    }

    void deallocate(T* p, size_t) noexcept { std::free(p); }

    template <typename U>
    bool operator==(const AlignedAllocator<U, Alignment>&) const noexcept {
        return true;
    }
};

using dvec = std::vector<double, AlignedAllocator<double>>;

} // namespace umm
