# 运行记录数据库
