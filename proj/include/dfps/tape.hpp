#pragma once

#include <vector>

#include "dfps/common.hpp"

namespace dfps {

/// Recorded primitive operations. Node payloads are dense matrices; scalars
/// are 1x1, vectors are single-column.
enum class Op : unsigned char {
    Leaf,
    Add,
    Sub,
    AddCol,    // matrix + column vector broadcast over columns
    Matmul,
    Tanh,
    Hadamard,  // elementwise product
    Scale,     // constant * node
    ColScale,  // per-column constant weights
    MeanCols,
    Sum,       // sum of all entries -> 1x1
    Dot,       // sum of elementwise products -> 1x1
    ConcatRows,
    SliceRows,
    SliceCols,
};

/// Reverse-mode tape over matrix-valued nodes.
///
/// Nodes are recorded in creation order; backward() visits them in strict
/// reverse creation order, so the adjoint of every input is complete before
/// it is consumed.
class Tape {
public:
    struct Node {
        Op op;
        bool requires_grad;
        int a = -1;
        int b = -1;
        int i0 = 0;          // slice offset
        double factor = 0.0; // Scale
        Mat value;
        Mat adjoint;
        Mat aux;             // ColScale weights
        std::vector<int> multi;  // ConcatRows inputs
    };

    int leaf(Mat value, bool requires_grad = true);
    int constant(Mat value) { return leaf(std::move(value), false); }

    int add(int a, int b);
    int sub(int a, int b);
    int add_col(int a, int col);
    int matmul(int a, int b);
    int tanh(int a);
    int hadamard(int a, int b);
    int scale(int a, double factor);
    int colscale(int a, const Mat& weights);
    int mean_cols(int a);
    int sum(int a);
    int dot(int a, int b);
    int concat_rows(const std::vector<int>& parts);
    int slice_rows(int a, int row0, int rows);
    int slice_cols(int a, int col0, int cols);

    const Mat& value(int id) const { return nodes_[id].value; }
    const Mat& grad(int id) const { return nodes_[id].adjoint; }
    int size() const { return static_cast<int>(nodes_.size()); }
    void reserve(int n) { nodes_.reserve(n); }

    /// Reverse sweep from a scalar output node. After the sweep the output
    /// node's adjoint is exactly 1 and every grad-requiring node holds its
    /// exact reverse-mode derivative.
    void backward(int output);

    /// Reverse sweep with an arbitrary seed adjoint (same shape as the
    /// output node); used for Jacobian rows of column-parallel graphs.
    void backward(int output, const Mat& seed);

private:
    int push(Node n);
    bool needs_grad(int id) const { return id >= 0 && nodes_[id].requires_grad; }

    std::vector<Node> nodes_;
};

}  // namespace dfps
