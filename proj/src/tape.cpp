#include "dfps/tape.hpp"

namespace dfps {

namespace {
// tanh through exp: vectorizes for double, exact at the extremes.
inline Mat tanh_mat(const Mat& x) {
    Mat t = (2.0 * x).array().exp().matrix();
    return (1.0 - 2.0 / (t.array() + 1.0)).matrix();
}
}  // namespace

int Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(Mat value, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.requires_grad = requires_grad;
    n.value = std::move(value);
    return push(std::move(n));
}

int Tape::add(int a, int b) {
    require(nodes_[a].value.rows() == nodes_[b].value.rows() &&
                nodes_[a].value.cols() == nodes_[b].value.cols(),
            "tape add: shape mismatch");
    Node n;
    n.op = Op::Add;
    n.a = a;
    n.b = b;
    n.requires_grad = needs_grad(a) || needs_grad(b);
    n.value = nodes_[a].value + nodes_[b].value;
    return push(std::move(n));
}

int Tape::sub(int a, int b) {
    require(nodes_[a].value.rows() == nodes_[b].value.rows() &&
                nodes_[a].value.cols() == nodes_[b].value.cols(),
            "tape sub: shape mismatch");
    Node n;
    n.op = Op::Sub;
    n.a = a;
    n.b = b;
    n.requires_grad = needs_grad(a) || needs_grad(b);
    n.value = nodes_[a].value - nodes_[b].value;
    return push(std::move(n));
}

int Tape::add_col(int a, int col) {
    require(nodes_[col].value.cols() == 1 &&
                nodes_[a].value.rows() == nodes_[col].value.rows(),
            "tape add_col: need a column vector matching the row count");
    Node n;
    n.op = Op::AddCol;
    n.a = a;
    n.b = col;
    n.requires_grad = needs_grad(a) || needs_grad(col);
    n.value = nodes_[a].value.colwise() + nodes_[col].value.col(0);
    return push(std::move(n));
}

int Tape::matmul(int a, int b) {
    require(nodes_[a].value.cols() == nodes_[b].value.rows(),
            "tape matmul: inner dimension mismatch");
    Node n;
    n.op = Op::Matmul;
    n.a = a;
    n.b = b;
    n.requires_grad = needs_grad(a) || needs_grad(b);
    n.value.noalias() = nodes_[a].value * nodes_[b].value;
    return push(std::move(n));
}

int Tape::tanh(int a) {
    Node n;
    n.op = Op::Tanh;
    n.a = a;
    n.requires_grad = needs_grad(a);
    n.value = tanh_mat(nodes_[a].value);
    return push(std::move(n));
}

int Tape::hadamard(int a, int b) {
    require(nodes_[a].value.rows() == nodes_[b].value.rows() &&
                nodes_[a].value.cols() == nodes_[b].value.cols(),
            "tape hadamard: shape mismatch");
    Node n;
    n.op = Op::Hadamard;
    n.a = a;
    n.b = b;
    n.requires_grad = needs_grad(a) || needs_grad(b);
    n.value = nodes_[a].value.cwiseProduct(nodes_[b].value);
    return push(std::move(n));
}

int Tape::scale(int a, double factor) {
    Node n;
    n.op = Op::Scale;
    n.a = a;
    n.factor = factor;
    n.requires_grad = needs_grad(a);
    n.value = factor * nodes_[a].value;
    return push(std::move(n));
}

int Tape::colscale(int a, const Mat& weights) {
    require(weights.rows() == 1 && weights.cols() == nodes_[a].value.cols(),
            "tape colscale: weights must be a row vector matching the column count");
    Node n;
    n.op = Op::ColScale;
    n.a = a;
    n.aux = weights;
    n.requires_grad = needs_grad(a);
    n.value = nodes_[a].value.array().rowwise() * weights.row(0).array();
    return push(std::move(n));
}

int Tape::mean_cols(int a) {
    Node n;
    n.op = Op::MeanCols;
    n.a = a;
    n.requires_grad = needs_grad(a);
    n.value = nodes_[a].value.rowwise().mean();
    return push(std::move(n));
}

int Tape::sum(int a) {
    Node n;
    n.op = Op::Sum;
    n.a = a;
    n.requires_grad = needs_grad(a);
    n.value = Mat::Constant(1, 1, nodes_[a].value.sum());
    return push(std::move(n));
}

int Tape::dot(int a, int b) {
    require(nodes_[a].value.rows() == nodes_[b].value.rows() &&
                nodes_[a].value.cols() == nodes_[b].value.cols(),
            "tape dot: shape mismatch");
    Node n;
    n.op = Op::Dot;
    n.a = a;
    n.b = b;
    n.requires_grad = needs_grad(a) || needs_grad(b);
    n.value = Mat::Constant(1, 1, nodes_[a].value.cwiseProduct(nodes_[b].value).sum());
    return push(std::move(n));
}

int Tape::concat_rows(const std::vector<int>& parts) {
    require(!parts.empty(), "tape concat_rows: empty input");
    Eigen::Index cols = nodes_[parts[0]].value.cols();
    Eigen::Index rows = 0;
    bool grad = false;
    for (int p : parts) {
        require(nodes_[p].value.cols() == cols, "tape concat_rows: column mismatch");
        rows += nodes_[p].value.rows();
        grad = grad || needs_grad(p);
    }
    Node n;
    n.op = Op::ConcatRows;
    n.multi = parts;
    n.requires_grad = grad;
    n.value.resize(rows, cols);
    Eigen::Index r = 0;
    for (int p : parts) {
        n.value.middleRows(r, nodes_[p].value.rows()) = nodes_[p].value;
        r += nodes_[p].value.rows();
    }
    return push(std::move(n));
}

int Tape::slice_rows(int a, int row0, int rows) {
    require(row0 >= 0 && row0 + rows <= nodes_[a].value.rows(),
            "tape slice_rows: out of range");
    Node n;
    n.op = Op::SliceRows;
    n.a = a;
    n.i0 = row0;
    n.requires_grad = needs_grad(a);
    n.value = nodes_[a].value.middleRows(row0, rows);
    return push(std::move(n));
}

int Tape::slice_cols(int a, int col0, int cols) {
    require(col0 >= 0 && col0 + cols <= nodes_[a].value.cols(),
            "tape slice_cols: out of range");
    Node n;
    n.op = Op::SliceCols;
    n.a = a;
    n.i0 = col0;
    n.requires_grad = needs_grad(a);
    n.value = nodes_[a].value.middleCols(col0, cols);
    return push(std::move(n));
}

void Tape::backward(int output) {
    require(output >= 0 && output < size(), "tape backward: bad node id");
    require(nodes_[output].value.rows() == 1 && nodes_[output].value.cols() == 1,
            "tape backward: output node must be scalar");
    backward(output, Mat::Ones(1, 1));
}

void Tape::backward(int output, const Mat& seed) {
    require(output >= 0 && output < size(), "tape backward: bad node id");
    require(seed.rows() == nodes_[output].value.rows() &&
                seed.cols() == nodes_[output].value.cols(),
            "tape backward: seed shape mismatch");

    for (int i = 0; i <= output; ++i) {
        Node& n = nodes_[i];
        if (n.requires_grad)
            n.adjoint = Mat::Zero(n.value.rows(), n.value.cols());
        else
            n.adjoint.resize(0, 0);
    }
    if (!nodes_[output].requires_grad) return;
    nodes_[output].adjoint = seed;

    for (int i = output; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.requires_grad) continue;
        const Mat& adj = n.adjoint;
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Add:
                if (needs_grad(n.a)) nodes_[n.a].adjoint += adj;
                if (needs_grad(n.b)) nodes_[n.b].adjoint += adj;
                break;
            case Op::Sub:
                if (needs_grad(n.a)) nodes_[n.a].adjoint += adj;
                if (needs_grad(n.b)) nodes_[n.b].adjoint -= adj;
                break;
            case Op::AddCol:
                if (needs_grad(n.a)) nodes_[n.a].adjoint += adj;
                if (needs_grad(n.b)) nodes_[n.b].adjoint += adj.rowwise().sum();
                break;
            case Op::Matmul:
                if (needs_grad(n.a))
                    nodes_[n.a].adjoint.noalias() += adj * nodes_[n.b].value.transpose();
                if (needs_grad(n.b))
                    nodes_[n.b].adjoint.noalias() += nodes_[n.a].value.transpose() * adj;
                break;
            case Op::Tanh:
                nodes_[n.a].adjoint.array() +=
                    adj.array() * (1.0 - n.value.array().square());
                break;
            case Op::Hadamard:
                if (needs_grad(n.a))
                    nodes_[n.a].adjoint.array() += adj.array() * nodes_[n.b].value.array();
                if (needs_grad(n.b))
                    nodes_[n.b].adjoint.array() += adj.array() * nodes_[n.a].value.array();
                break;
            case Op::Scale:
                nodes_[n.a].adjoint += n.factor * adj;
                break;
            case Op::ColScale:
                nodes_[n.a].adjoint.array() += adj.array().rowwise() * n.aux.row(0).array();
                break;
            case Op::MeanCols:
                nodes_[n.a].adjoint.colwise() +=
                    adj.col(0) / static_cast<double>(nodes_[n.a].value.cols());
                break;
            case Op::Sum:
                nodes_[n.a].adjoint.array() += adj(0, 0);
                break;
            case Op::Dot:
                if (needs_grad(n.a)) nodes_[n.a].adjoint += adj(0, 0) * nodes_[n.b].value;
                if (needs_grad(n.b)) nodes_[n.b].adjoint += adj(0, 0) * nodes_[n.a].value;
                break;
            case Op::ConcatRows: {
                Eigen::Index r = 0;
                for (int p : n.multi) {
                    Eigen::Index pr = nodes_[p].value.rows();
                    if (needs_grad(p)) nodes_[p].adjoint += adj.middleRows(r, pr);
                    r += pr;
                }
                break;
            }
            case Op::SliceRows:
                nodes_[n.a].adjoint.middleRows(n.i0, n.value.rows()) += adj;
                break;
            case Op::SliceCols:
                nodes_[n.a].adjoint.middleCols(n.i0, n.value.cols()) += adj;
                break;
        }
    }
}

}  // namespace dfps
