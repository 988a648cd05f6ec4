#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <numeric>
#include <string>
#include <vector>

namespace clda {

/// Allocator returning 64-byte aligned storage. SIMD kernels peel a
/// different number of leading elements depending on the buffer address, so
/// a fixed alignment keeps float results independent of where the heap
/// happened to place a tensor.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

/// Dense row-major float tensor. Activation layout is NCHW.
struct Tensor {
    std::vector<int> shape;
    FloatBuffer data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, float fill = 0.0f) : shape(std::move(s)), data(count(shape), fill) {}

    static std::size_t count(const std::vector<int>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1},
                               [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    /// Pointer to the start of item `n` along the leading axis.
    float* item(int n) { return data.data() + static_cast<std::size_t>(n) * (size() / shape[0]); }
    const float* item(int n) const { return data.data() + static_cast<std::size_t>(n) * (size() / shape[0]); }

    void zero() { std::fill(data.begin(), data.end(), 0.0f); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const;
};

}  // namespace clda
