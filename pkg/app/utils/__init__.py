# 日志与进度播报
