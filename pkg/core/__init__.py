# core/__init__.py

# 这个文件将 'core' 目录标记为一个Python包，
# 允许我们使用 `from core.tensor import FieldTensor` 这样的导入语句。
